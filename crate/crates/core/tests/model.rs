//! Whole-model checks against a plain reference forward pass.

use rand::Rng;

use trpts::refine::{refine, RefinePlan, TokenScores};
use trpts::rng::stream;
use trpts::tensor::{Graph, Tensor};
use trpts::vit::{patchify, BlockNames, ForwardOptions, ModelConfig, ViTModel};

type Mat = Vec<Vec<f64>>;

fn cfg() -> ModelConfig {
    ModelConfig {
        image_height: 12,
        image_width: 8,
        channels: 2,
        patch_size: 4,
        embed_dim: 12,
        num_layers: 4,
        num_heads: 3,
        mlp_ratio: 2,
        num_classes: 5,
        seed: 21,
    }
}

fn images(b: usize, c: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, "model-test");
    let n = b * c.image_height * c.image_width * c.channels;
    Tensor::new(
        vec![b, c.image_height, c.image_width, c.channels],
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

struct Reference<'a> {
    model: &'a ViTModel<f64>,
}

impl Reference<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.model.params().get(name).unwrap().data()
    }

    fn linear(&self, x: &Mat, w: &str, b: &str) -> Mat {
        let (w, b) = (self.p(w), self.p(b));
        let out = b.len();
        let inp = w.len() / out;
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * row[i]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, x: &Mat, g: &str, b: &str) -> Mat {
        let (g, b) = (self.p(g), self.p(b));
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mu = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
                let s = 1.0 / (var + 1e-6).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mu) * s * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    /// Logits for one image, applying `plan` after the listed blocks.
    fn logits(&self, image: &Tensor<f64>, plan: Option<&RefinePlan>) -> Vec<f64> {
        let c = self.model.config();
        let (d, heads) = (c.embed_dim, c.num_heads);
        let dh = d / heads;
        let patches = patchify(image, c).unwrap();
        let rows: Mat = patches
            .data()
            .chunks(c.patch_dim())
            .map(|r| r.to_vec())
            .collect();
        let mut h = vec![self.p("cls").to_vec()];
        h.extend(self.linear(&rows, "patch.weight", "patch.bias"));
        let pos = self.p("pos");
        for (t, row) in h.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += pos[t * d + j];
            }
        }
        for layer in 0..c.num_layers {
            let nm = BlockNames::new(layer);
            let t = h.len();
            let a = self.layer_norm(&h, &nm.norm1_gain, &nm.norm1_bias);
            let q = self.linear(&a, &nm.q.0, &nm.q.1);
            let k = self.linear(&a, &nm.k.0, &nm.k.1);
            let v = self.linear(&a, &nm.v.0, &nm.v.1);
            let mut ctx = vec![vec![0.0; d]; t];
            let mut cls_row = vec![0.0; t];
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..t {
                    let s: Vec<f64> = (0..t)
                        .map(|j| {
                            (0..dh).map(|e| q[i][off + e] * k[j][off + e]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    let att: Vec<f64> = s.iter().map(|x| (x - m).exp() / z).collect();
                    if i == 0 {
                        for j in 0..t {
                            cls_row[j] += att[j] / heads as f64;
                        }
                    }
                    for j in 0..t {
                        for e in 0..dh {
                            ctx[i][off + e] += att[j] * v[j][off + e];
                        }
                    }
                }
            }
            let o = self.linear(&ctx, &nm.o.0, &nm.o.1);
            for (hr, or) in h.iter_mut().zip(&o) {
                for (x, y) in hr.iter_mut().zip(or) {
                    *x += y;
                }
            }
            let m = self.layer_norm(&h, &nm.norm2_gain, &nm.norm2_bias);
            let mut m = self.linear(&m, &nm.fc1.0, &nm.fc1.1);
            for row in &mut m {
                for x in row.iter_mut() {
                    let u = 0.797_884_560_802_865_4 * (*x + 0.044_715 * *x * *x * *x);
                    *x = 0.5 * *x * (1.0 + u.tanh());
                }
            }
            let m = self.linear(&m, &nm.fc2.0, &nm.fc2.1);
            for (hr, mr) in h.iter_mut().zip(&m) {
                for (x, y) in hr.iter_mut().zip(mr) {
                    *x += y;
                }
            }
            if let Some(plan) = plan.filter(|p| p.refines_at(layer)) {
                let flat = Tensor::new(vec![t, d], h.concat()).unwrap();
                let scores = TokenScores(cls_row[1..].to_vec());
                let out = refine(&flat, &scores, plan.rho).unwrap();
                h = out.data().chunks(d).map(|r| r.to_vec()).collect();
            }
        }
        let h = self.layer_norm(&h[..1].to_vec(), "norm.gain", "norm.bias");
        self.linear(&h, "head.weight", "head.bias").remove(0)
    }
}

fn single(images: &Tensor<f64>, i: usize) -> Tensor<f64> {
    let per = images.numel() / images.shape()[0];
    Tensor::new(
        images.shape()[1..].to_vec(),
        images.data()[i * per..(i + 1) * per].to_vec(),
    )
    .unwrap()
}

#[test]
fn forward_matches_reference() {
    let c = cfg();
    let model = ViTModel::<f64>::new(c.clone()).unwrap();
    let x = images(3, &c, 1);
    let plan = RefinePlan::explicit(vec![1, 2], 0.5).unwrap();
    for p in [None, Some(&plan)] {
        let got = model.logits(&x, p).unwrap();
        let reference = Reference { model: &model };
        for i in 0..3 {
            let want = reference.logits(&single(&x, i), p);
            for (k, w) in want.iter().enumerate() {
                let g = got.data()[i * c.num_classes + k];
                assert!((g - w).abs() < 1e-10, "image {i} class {k}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn patch_order_invariant_without_positions() {
    let c = cfg();
    let mut model = ViTModel::<f64>::new(c.clone()).unwrap();
    let n = c.num_tokens();
    model
        .params_mut()
        .assign("pos", Tensor::zeros(vec![n + 1, c.embed_dim]))
        .unwrap();
    let x = images(1, &c, 2);
    let patches = patchify(&single(&x, 0), &c).unwrap();
    let pd = c.patch_dim();
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut shuffled = Vec::new();
    for &i in &perm {
        shuffled.extend_from_slice(&patches.data()[i * pd..(i + 1) * pd]);
    }
    let run = |data: Vec<f64>| {
        let mut g = Graph::new();
        let t = model
            .forward_patches(
                &mut g,
                &Tensor::new(vec![1, n, pd], data).unwrap(),
                None,
                ForwardOptions::default(),
            )
            .unwrap();
        g.value(t.logits).data().to_vec()
    };
    let a = run(patches.data().to_vec());
    let b = run(shuffled);
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn refinement_records_partition_patches() {
    let c = cfg();
    let model = ViTModel::<f64>::new(c.clone()).unwrap();
    let x = images(2, &c, 3);
    let plan = RefinePlan::explicit(vec![1, 3], 0.5).unwrap();
    let mut g = Graph::new();
    let t = model
        .forward(&mut g, &x, Some(&plan), ForwardOptions::default())
        .unwrap();
    assert_eq!(t.refinements.len(), 4);
    for r in &t.refinements {
        let mut all: Vec<usize> = r
            .kept_patch_indices
            .iter()
            .chain(&r.merged_from_indices)
            .copied()
            .collect();
        all.sort_unstable();
        if r.layer == 1 {
            assert_eq!(all, (0..c.num_tokens()).collect::<Vec<_>>());
        } else {
            // patches inside a surviving merged token appear in neither list
            all.dedup();
            assert_eq!(
                all.len(),
                r.kept_patch_indices.len() + r.merged_from_indices.len()
            );
            assert!(all.iter().all(|&i| i < c.num_tokens()));
        }
    }
}
