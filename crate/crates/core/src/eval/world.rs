use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Demonstration, DemoLibrary, Meta, QuerySample};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Rng, Tensor};

/// Label names with no meaning to the scorer, used by the HM perturbation.
pub const NON_SEMANTIC_LABELS: [&str; 10] = ["foo", "bar", "baz", "qux", "quux", "corge", "grault", "garply", "waldo", "fred"];

const LABEL_WORDS: [&str; 10] = ["yes", "no", "maybe", "left", "right", "up", "down", "red", "green", "blue"];

pub fn is_semantic(label: &str) -> bool {
    !NON_SEMANTIC_LABELS.contains(&label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Task clusters C; one cluster is the specific-mapping case.
    pub clusters: usize,
    /// Latent task dimension c.
    pub latent_dim: usize,
    /// Embedding width d.
    pub dim: usize,
    pub n_demos: usize,
    pub n_queries: usize,
    /// Per-coordinate std of tau around its centroid.
    pub tau_noise: f64,
    /// Centroid distance as a multiple of 4x the noise scale; must be >= 1.
    pub separation: f64,
    pub styles: usize,
    pub style_scale: f64,
    pub img_noise: f64,
    pub txt_noise: f64,
    /// Probability that an evaluation query's image comes from another cluster.
    pub decoy: f64,
    pub labels_per_cluster: usize,
    /// Weight of the label direction inside qr_emb.
    pub label_scale: f64,
    pub difficulty_std: f64,
    pub instruction: String,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::generalized()
    }
}

impl WorldSpec {
    /// Many clusters, image similarity dominated by shared styles.
    pub fn generalized() -> Self {
        Self {
            clusters: 5,
            latent_dim: 8,
            dim: 64,
            n_demos: 300,
            n_queries: 300,
            tau_noise: 0.35,
            separation: 1.0,
            styles: 6,
            style_scale: 12.0,
            img_noise: 0.1,
            txt_noise: 0.1,
            decoy: 1.0,
            labels_per_cluster: 2,
            label_scale: 0.5,
            difficulty_std: 0.3,
            instruction: "Answer the question about the image.".into(),
        }
    }

    /// One cluster: every local mapping shares the same centroid.
    pub fn specific() -> Self {
        Self { clusters: 1, tau_noise: 0.7, n_queries: 100, decoy: 0.0, ..Self::generalized() }
    }

    /// Noise scale tau_noise * sqrt(c).
    pub fn noise_scale(&self) -> f64 {
        self.tau_noise * (self.latent_dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.clusters == 0 || self.latent_dim == 0 || self.dim == 0 || self.n_demos == 0 || self.styles == 0 {
            return bad("clusters, latent_dim, dim, n_demos and styles must be positive");
        }
        if self.labels_per_cluster < 2 || self.labels_per_cluster > LABEL_WORDS.len() {
            return bad("labels_per_cluster must be in 2..=10");
        }
        if self.clusters > self.latent_dim {
            return bad("clusters must not exceed latent_dim");
        }
        if self.dim < self.latent_dim {
            return bad("dim must be at least latent_dim so the mixing matrices have full rank");
        }
        if self.clusters > 1 && self.separation < 1.0 {
            return bad("separation below 1 puts centroids closer than 4x the noise scale");
        }
        if !(0.0..=1.0).contains(&self.decoy) {
            return bad("decoy must be a probability");
        }
        let nonneg = [self.tau_noise, self.style_scale, self.img_noise, self.txt_noise, self.label_scale, self.difficulty_std];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise and scale parameters must be finite and non-negative");
        }
        Ok(())
    }
}

/// Latent structure behind a generated library and query set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    /// C x c task centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Image mixing matrix A (d x c).
    pub a: Tensor,
    /// Text mixing matrix B (d x c).
    pub b: Tensor,
    /// Unit style vectors shared across clusters.
    pub style_vecs: Vec<Vec<f64>>,
    /// Per cluster, one direction in latent space per label.
    pub label_dirs: Vec<Vec<Vec<f64>>>,
    /// Per cluster and label, the response embedding direction.
    pub label_vecs: Vec<Vec<Vec<f64>>>,
    pub label_names: Vec<Vec<String>>,
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row_slice(i), v)).collect()
}

/// Orthonormal rows from Gram-Schmidt on Gaussian vectors.
fn orthonormal_rows(k: usize, c: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = rng.normal_vec(c, 1.0);
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    rows
}

impl SyntheticWorld {
    pub fn label(&self, cluster: usize, j: usize) -> &str {
        &self.label_names[cluster][j]
    }

    /// Text embedding of a cluster centroid, B * mu_k.
    pub fn centroid_text(&self, cluster: usize) -> Vec<f64> {
        mat_vec(&self.b, &self.centroids[cluster])
    }

    pub fn text_of(&self, tau: &[f64]) -> Vec<f64> {
        mat_vec(&self.b, tau)
    }

    pub fn image_of(&self, tau: &[f64]) -> Vec<f64> {
        mat_vec(&self.a, tau)
    }
}

struct Sample {
    cluster: usize,
    image_cluster: usize,
    tau: Vec<f64>,
    label: usize,
    style: usize,
    img: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    qr: Vec<f64>,
    difficulty: f64,
}

fn sample(w: &SyntheticWorld, i: usize, decoy: f64, rng: &mut Rng) -> Sample {
    let s = &w.spec;
    let (c, d) = (s.latent_dim, s.dim);
    let k = i % s.clusters;
    let mu = &w.centroids[k];
    let eps = rng.normal_vec(c, s.tau_noise);
    let tau: Vec<f64> = mu.iter().zip(&eps).map(|(m, e)| m + e).collect();
    let mut label = 0;
    let mut best = f64::NEG_INFINITY;
    for (j, dir) in w.label_dirs[k].iter().enumerate() {
        let v = dot(dir, &eps);
        if v > best {
            best = v;
            label = j;
        }
    }
    let style = rng.below(s.styles);
    let mut image_cluster = k;
    let mut t_img = tau.clone();
    if s.clusters > 1 && decoy > 0.0 && rng.uniform() < decoy {
        image_cluster = (k + 1 + rng.below(s.clusters - 1)) % s.clusters;
        let e = rng.normal_vec(c, s.tau_noise);
        t_img = w.centroids[image_cluster].iter().zip(&e).map(|(m, e)| m + e).collect();
    }
    let add = |a: Vec<f64>, b: &[f64], scale: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + scale * y).collect() };
    let img = add(add(w.image_of(&t_img), &w.style_vecs[style], s.style_scale), &rng.normal_vec(d, s.img_noise), 1.0);
    let q = add(w.text_of(&tau), &rng.normal_vec(d, s.txt_noise), 1.0);
    let lv = &w.label_vecs[k][label];
    let r = add(lv.clone(), &rng.normal_vec(d, s.txt_noise), 1.0);
    let qr = add(add(w.text_of(&tau), lv, s.label_scale), &rng.normal_vec(d, s.txt_noise), 1.0);
    let difficulty = s.difficulty_std * rng.normal();
    Sample { cluster: k, image_cluster, tau, label, style, img, q, r, qr, difficulty }
}

fn sample_meta(w: &SyntheticWorld, s: &Sample) -> Meta {
    let mut m = Meta::new();
    m.insert("tau".into(), json!(s.tau));
    m.insert("cluster".into(), json!(s.cluster));
    m.insert("label".into(), json!(w.label(s.cluster, s.label)));
    m.insert("labels".into(), json!(w.label_names[s.cluster]));
    m.insert("difficulty".into(), json!(s.difficulty));
    m.insert("style".into(), json!(s.style));
    m
}

/// Build a world and draw its library and (decoy-image) evaluation queries.
pub fn generate_world(spec: &WorldSpec, rng: &mut Rng) -> Result<(SyntheticWorld, DemoLibrary, Vec<QuerySample>)> {
    spec.validate()?;
    let (cn, c, d, l) = (spec.clusters, spec.latent_dim, spec.dim, spec.labels_per_cluster);

    // Regular simplex: centered basis rows, randomly rotated, scaled so
    // every pairwise distance is separation * 4 * noise scale.
    let centroids = if cn == 1 {
        vec![vec![0.0; c]]
    } else {
        let q = orthonormal_rows(cn, c, rng);
        let scale = spec.separation * 4.0 * spec.noise_scale() / 2f64.sqrt();
        (0..cn)
            .map(|i| {
                (0..c)
                    .map(|j| {
                        let mean: f64 = q.iter().map(|r| r[j]).sum::<f64>() / cn as f64;
                        scale * (q[i][j] - mean)
                    })
                    .collect()
            })
            .collect()
    };
    let a = Tensor::matrix(d, c, rng.normal_vec(d * c, 1.0 / (c as f64).sqrt()))?;
    let b = Tensor::matrix(d, c, rng.normal_vec(d * c, 1.0 / (c as f64).sqrt()))?;
    let style_vecs = (0..spec.styles)
        .map(|_| {
            let v = rng.normal_vec(d, 1.0);
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let label_dirs = (0..cn).map(|_| (0..l).map(|_| rng.normal_vec(c, 1.0)).collect()).collect();
    let label_vecs = (0..cn).map(|_| (0..l).map(|_| rng.normal_vec(d, 1.0 / (d as f64).sqrt())).collect()).collect();
    let label_names = (0..cn)
        .map(|k| (0..l).map(|j| if cn == 1 { LABEL_WORDS[j].to_string() } else { format!("{}-{k}", LABEL_WORDS[j]) }).collect())
        .collect();
    let world = SyntheticWorld { spec: spec.clone(), centroids, a, b, style_vecs, label_dirs, label_vecs, label_names };

    let mut demos = Vec::with_capacity(spec.n_demos);
    for i in 0..spec.n_demos {
        let s = sample(&world, i, 0.0, rng);
        demos.push(Demonstration {
            id: format!("d{i:05}"),
            text_q: format!("question {i}"),
            text_r: world.label(s.cluster, s.label).to_string(),
            meta: sample_meta(&world, &s),
            image_emb: s.img,
            q_emb: s.q,
            r_emb: s.r,
            qr_emb: s.qr,
        });
    }
    let mut queries = Vec::with_capacity(spec.n_queries);
    for i in 0..spec.n_queries {
        let s = sample(&world, i, spec.decoy, rng);
        let mut meta = sample_meta(&world, &s);
        meta.insert("image_cluster".into(), json!(s.image_cluster));
        queries.push(QuerySample {
            id: format!("q{i:05}"),
            image_emb: s.img,
            text_q: format!("query {i}"),
            q_emb: s.q,
            ground_truth_r: Some(world.label(s.cluster, s.label).to_string()),
            meta,
        });
    }
    let mut lib_meta = Meta::new();
    lib_meta.insert("instruction".into(), json!(spec.instruction));
    lib_meta.insert("inst_emb".into(), json!(rng.normal_vec(d, 1.0 / (d as f64).sqrt())));
    lib_meta.insert("clusters".into(), json!(cn));
    let lib = DemoLibrary::new(demos, lib_meta)?;
    Ok((world, lib, queries))
}
