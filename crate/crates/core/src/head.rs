//! Class-specific residual attention head. Per class, spatial attention over
//! the feature map is combined with the global average pooled feature; one
//! head per temperature, fused by an arithmetic mean of logits.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::{FeatureMap, StateKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{onehot_argmax_rows, sigmoid, softmax_rows};
use crate::tensor::Tensor;

/// Attention temperature; `Infinite` degenerates to picking the
/// maximum-scoring location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Finite(f64),
    Infinite,
}

impl Temperature {
    pub fn validate(&self) -> Result<()> {
        match self {
            Temperature::Finite(t) if *t > 0.0 && t.is_finite() => Ok(()),
            Temperature::Infinite => Ok(()),
            Temperature::Finite(t) => Err(Error::Config(format!(
                "temperature must be positive and finite (or \"inf\"), got {t}"
            ))),
        }
    }
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Temperature::Finite(t) => s.serialize_f64(*t),
            Temperature::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(Temperature::Finite(t)),
            Raw::Str(s) if s.eq_ignore_ascii_case("inf") => Ok(Temperature::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "temperature must be a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionHeadConfig {
    pub temperature: Temperature,
    pub lambda: f64,
}

impl AttentionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        self.temperature.validate()?;
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Default heads: temperatures {1, 2, 4, inf} with a shared lambda of 0.1.
pub fn default_heads() -> Vec<AttentionHeadConfig> {
    [
        Temperature::Finite(1.0),
        Temperature::Finite(2.0),
        Temperature::Finite(4.0),
        Temperature::Infinite,
    ]
    .into_iter()
    .map(|temperature| AttentionHeadConfig {
        temperature,
        lambda: 0.1,
    })
    .collect()
}

/// Per-class weight vectors m_i (rows of M) plus per-class bias.
#[derive(Debug, Clone)]
pub struct ClassifierMatrix {
    pub m: Tensor,
    pub bias: Tensor,
}

impl ClassifierMatrix {
    pub fn new(m: Tensor, bias: Tensor) -> Result<Self> {
        if m.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "classifier matrix must be [C,d], got {:?}",
                m.shape()
            )));
        }
        if bias.shape() != [m.shape()[0]] {
            return Err(Error::shape("classifier bias", &[m.shape()[0]], bias.shape()));
        }
        Ok(ClassifierMatrix { m, bias })
    }

    pub fn zeros(classes: usize, d: usize) -> Self {
        ClassifierMatrix {
            m: Tensor::zeros(vec![classes, d]),
            bias: Tensor::zeros(vec![classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.m
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn dim(&self) -> usize {
        self.m.shape()[1]
    }
}

/// Per-class, per-location raw scores S[i,k] = m_i . x_k (bias excluded).
pub fn class_score_map(x: &FeatureMap, m: &ClassifierMatrix) -> Result<Tensor> {
    if m.dim() != x.d() {
        return Err(Error::shape(
            "class_score_map: classifier d vs feature d",
            &[m.classes(), x.d()],
            m.m.shape(),
        ));
    }
    let (c, d, l) = (m.classes(), x.d(), x.locations());
    let xd = x.values().data();
    let md = m.m.data();
    let mut s = vec![0.0; c * l];
    for i in 0..c {
        for j in 0..d {
            let mv = md[i * d + j];
            if mv == 0.0 {
                continue;
            }
            for k in 0..l {
                s[i * l + k] += mv * xd[j * l + k];
            }
        }
    }
    Tensor::new(vec![c, x.h(), x.w()], s)
}

/// Attention weights over spatial locations for one class's score plane.
/// Finite T: softmax of T*S; infinite T: one-hot at the max (lowest
/// row-major index on ties). Weights sum to 1.
pub fn spatial_attention(scores: &Tensor, temperature: Temperature) -> Result<Tensor> {
    temperature.validate()?;
    let l = scores.len();
    let weights = match temperature {
        Temperature::Finite(t) => softmax_rows(scores.data(), 1, l, t),
        Temperature::Infinite => onehot_argmax_rows(scores.data(), 1, l),
    };
    Tensor::new(scores.shape().to_vec(), weights)
}

/// One head's logits: logit_i = m_i . (g + lambda * a_i) + b_i, where g is
/// the spatial mean of X and a_i the attention-weighted feature for class i.
pub fn csra_single_head(
    x: &FeatureMap,
    m: &ClassifierMatrix,
    head: &AttentionHeadConfig,
) -> Result<Vec<f64>> {
    head.validate()?;
    let scores = class_score_map(x, m)?;
    let (c, d, l) = (m.classes(), x.d(), x.locations());
    let xd = x.values().data();
    let md = m.m.data();
    let sd = scores.data();
    // g = spatial mean of X
    let mut g = vec![0.0; d];
    for j in 0..d {
        let mut s = 0.0;
        for k in 0..l {
            s += xd[j * l + k];
        }
        g[j] = s / l as f64;
    }
    let mut logits = vec![0.0; c];
    for i in 0..c {
        let plane = Tensor::new(vec![l], sd[i * l..(i + 1) * l].to_vec())?;
        let att = spatial_attention(&plane, head.temperature)?;
        let ad = att.data();
        let mut logit = m.bias.data()[i];
        for j in 0..d {
            let mut a_ij = 0.0;
            for k in 0..l {
                a_ij += ad[k] * xd[j * l + k];
            }
            logit += md[i * d + j] * (g[j] + head.lambda * a_ij);
        }
        logits[i] = logit;
    }
    Ok(logits)
}

/// Arithmetic mean of per-head logits.
pub fn fuse_heads(
    x: &FeatureMap,
    m: &ClassifierMatrix,
    heads: &[AttentionHeadConfig],
) -> Result<Vec<f64>> {
    if heads.is_empty() {
        return Err(Error::invalid("fuse_heads requires at least one head"));
    }
    let mut fused = vec![0.0; m.classes()];
    for head in heads {
        let logits = csra_single_head(x, m, head)?;
        for (f, l) in fused.iter_mut().zip(logits) {
            *f += l;
        }
    }
    for f in fused.iter_mut() {
        *f /= heads.len() as f64;
    }
    Ok(fused)
}

/// Sigmoid probabilities and the inclusive-threshold label decision.
pub fn predict_labels(logits: &[f64], threshold: f64) -> Result<(Vec<f64>, Vec<u8>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold must lie in [0,1], got {threshold}"
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logit in predict_labels".into()));
    }
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let labels: Vec<u8> = probs
        .iter()
        .map(|&p| if p >= threshold { 1 } else { 0 })
        .collect();
    Ok((probs, labels))
}

/// The trainable head: classifier matrix shared by attention scoring and the
/// final logits, plus the fixed head configurations.
#[derive(Debug, Clone)]
pub struct CsraHead {
    pub classifier: ClassifierMatrix,
    pub heads: Vec<AttentionHeadConfig>,
}

impl CsraHead {
    pub fn init(
        classes: usize,
        d: usize,
        heads: Vec<AttentionHeadConfig>,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Config("head list must be non-empty".into()));
        }
        for h in &heads {
            h.validate()?;
        }
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        let m: Vec<f64> = (0..classes * d).map(|_| normal.sample(rng)).collect();
        Ok(CsraHead {
            classifier: ClassifierMatrix::new(
                Tensor::new(vec![classes, d], m)?,
                Tensor::zeros(vec![classes]),
            )?,
            heads,
        })
    }

    /// Tape forward from the feature batch [N,d,h,w] to fused logits [N,C].
    pub fn forward(&self, g: &mut Graph, feat: NodeId) -> Result<NodeId> {
        let fs = g.value(feat).shape().to_vec();
        if fs.len() != 4 || fs[1] != self.classifier.dim() {
            return Err(Error::shape(
                "csra head input",
                &[0, self.classifier.dim(), 0, 0],
                &fs,
            ));
        }
        let (n, d, l) = (fs[0], fs[1], fs[2] * fs[3]);
        let m = g.param("head.weight", self.classifier.m.clone());
        let b = g.param("head.bias", self.classifier.bias.clone());
        let flat = g.reshape(feat, vec![n, d, l])?;
        let gap4 = g.global_avg_pool(feat)?;
        let gap = g.reshape(gap4, vec![n, d])?;
        let scores = g.class_scores(flat, m)?;
        let mut fused: Option<NodeId> = None;
        for head in &self.heads {
            let att = match head.temperature {
                Temperature::Finite(t) => g.softmax_last(scores, t)?,
                Temperature::Infinite => g.onehot_argmax_last(scores),
            };
            let attended = g.attend(flat, att)?;
            let z = g.residual_combine(gap, attended, head.lambda)?;
            let logits = g.head_logits(z, m, b)?;
            fused = Some(match fused {
                Some(acc) => g.add(acc, logits)?,
                None => logits,
            });
        }
        let acc = fused.expect("non-empty heads");
        Ok(g.scale(acc, 1.0 / self.heads.len() as f64))
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut Tensor)) {
        f("head.weight", StateKind::Trainable, &mut self.classifier.m);
        f("head.bias", StateKind::Trainable, &mut self.classifier.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(Tensor::new(vec![d, h, w], data).unwrap()).unwrap()
    }

    fn rand_classifier(rng: &mut ChaCha8Rng, c: usize, d: usize) -> ClassifierMatrix {
        let m = (0..c * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        ClassifierMatrix::new(
            Tensor::new(vec![c, d], m).unwrap(),
            Tensor::new(vec![c], b).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn class_score_map_by_hand() {
        // d=2, 1x2 spatial: x_0 = (1,0), x_1 = (0,2); m_0 = (3,4)
        let x = FeatureMap::new(Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let m = ClassifierMatrix::new(
            Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(),
            Tensor::new(vec![1], vec![7.0]).unwrap(),
        )
        .unwrap();
        let s = class_score_map(&x, &m).unwrap();
        // bias excluded: scores are 3*1=3 and 4*2=8
        assert_eq!(s.data(), &[3.0, 8.0]);
    }

    #[test]
    fn attention_examples() {
        let s = Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let a = spatial_attention(&s, Temperature::Finite(1.0)).unwrap();
        assert!((a.data()[0] - 0.25).abs() < 1e-12);
        assert!((a.data()[1] - 0.75).abs() < 1e-12);

        let inf = spatial_attention(&s, Temperature::Infinite).unwrap();
        assert_eq!(inf.data(), &[0.0, 1.0]);

        // tie at T=INF: lowest flat index wins
        let tie = Tensor::new(vec![1, 3], vec![5.0, 5.0, 1.0]).unwrap();
        let a = spatial_attention(&tie, Temperature::Infinite).unwrap();
        assert_eq!(a.data(), &[1.0, 0.0, 0.0]);

        // constant scores under finite T: uniform weights
        let flat = Tensor::full(vec![2, 2], 0.3);
        let a = spatial_attention(&flat, Temperature::Finite(4.0)).unwrap();
        for &w in a.data() {
            assert!((w - 0.25).abs() < 1e-12);
        }

        assert!(spatial_attention(&s, Temperature::Finite(0.0)).is_err());
        assert!(spatial_attention(&s, Temperature::Finite(-2.0)).is_err());
    }

    #[test]
    fn attention_weights_form_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let l = rng.gen_range(1..20);
            let data: Vec<f64> = (0..l).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let s = Tensor::new(vec![l], data).unwrap();
            let t = Temperature::Finite(rng.gen_range(0.1..8.0));
            let a = spatial_attention(&s, t).unwrap();
            assert!(a.data().iter().all(|&w| w >= 0.0));
            let sum: f64 = a.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_reduces_to_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (c, d, h, w) = (3, 5, 2, 3);
            let x = rand_map(&mut rng, d, h, w);
            let m = rand_classifier(&mut rng, c, d);
            let head = AttentionHeadConfig {
                temperature: Temperature::Finite(rng.gen_range(0.2..6.0)),
                lambda: 0.0,
            };
            let logits = csra_single_head(&x, &m, &head).unwrap();
            // GAP baseline: m_i . g + b_i
            let l = h * w;
            for i in 0..c {
                let mut want = m.bias.data()[i];
                for j in 0..d {
                    let g: f64 =
                        x.values().data()[j * l..(j + 1) * l].iter().sum::<f64>() / l as f64;
                    want += m.m.data()[i * d + j] * g;
                }
                assert!((logits[i] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infinite_temperature_picks_max_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (c, d, h, w) = (4, 6, 3, 3);
            let x = rand_map(&mut rng, d, h, w);
            let m = rand_classifier(&mut rng, c, d);
            let scores = class_score_map(&x, &m).unwrap();
            let l = h * w;
            for i in 0..c {
                let plane = &scores.data()[i * l..(i + 1) * l];
                let a = spatial_attention(
                    &Tensor::new(vec![l], plane.to_vec()).unwrap(),
                    Temperature::Infinite,
                )
                .unwrap();
                // m_i . a_i == max_k S[i,k] exactly: a_i is x at the argmax
                let dot: f64 = (0..l)
                    .map(|k| {
                        a.data()[k]
                            * (0..d)
                                .map(|j| m.m.data()[i * d + j] * x.values().data()[j * l + k])
                                .sum::<f64>()
                    })
                    .sum();
                let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(dot, max);
            }
        }
    }

    #[test]
    fn spatial_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (c, d, h, w) = (3, 4, 2, 2);
        let x = rand_map(&mut rng, d, h, w);
        let m = rand_classifier(&mut rng, c, d);
        let heads = default_heads();
        let base = fuse_heads(&x, &m, &heads).unwrap();
        // rotate spatial locations by one
        let l = h * w;
        let mut rotated = vec![0.0; d * l];
        for j in 0..d {
            for k in 0..l {
                rotated[j * l + (k + 1) % l] = x.values().data()[j * l + k];
            }
        }
        let xr = FeatureMap::new(Tensor::new(vec![d, h, w], rotated).unwrap()).unwrap();
        let perm = fuse_heads(&xr, &m, &heads).unwrap();
        for (a, b) in base.iter().zip(&perm) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_is_mean_and_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 4, 2, 2);
        let m = rand_classifier(&mut rng, 2, 4);
        let heads = vec![
            AttentionHeadConfig { temperature: Temperature::Finite(1.0), lambda: 0.3 },
            AttentionHeadConfig { temperature: Temperature::Infinite, lambda: 0.3 },
        ];
        let fused = fuse_heads(&x, &m, &heads).unwrap();
        let a = csra_single_head(&x, &m, &heads[0]).unwrap();
        let b = csra_single_head(&x, &m, &heads[1]).unwrap();
        for i in 0..2 {
            assert!((fused[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
        assert!(fuse_heads(&x, &m, &[]).is_err());
        // single head: fusion is identity
        let single = fuse_heads(&x, &m, &heads[..1]).unwrap();
        for i in 0..2 {
            assert!((single[i] - a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_threshold_is_inclusive() {
        // logit 0 -> prob exactly 0.5 -> positive at threshold 0.5
        let (probs, labels) = predict_labels(&[0.0, -0.1, 4.0], 0.5).unwrap();
        assert_eq!(probs[0], 0.5);
        assert_eq!(labels, vec![1, 0, 1]);
        // extreme thresholds
        let (_, all) = predict_labels(&[-30.0, 30.0], 0.0).unwrap();
        assert_eq!(all, vec![1, 1]);
        let (_, none) = predict_labels(&[-30.0, 30.0], 1.0).unwrap();
        assert_eq!(none, vec![0, 0]);
        assert!(predict_labels(&[0.0], 1.5).is_err());
        assert!(predict_labels(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn tape_forward_matches_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (c, d, h, w) = (3, 8, 2, 3);
        let head = CsraHead::init(c, d, default_heads(), &mut rng).unwrap();
        let feat: Vec<f64> = (0..2 * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, d, h, w], feat.clone()).unwrap());
        let logits = head.forward(&mut g, x).unwrap();
        for n in 0..2 {
            let fm = FeatureMap::new(
                Tensor::new(vec![d, h, w], feat[n * d * h * w..(n + 1) * d * h * w].to_vec())
                    .unwrap(),
            )
            .unwrap();
            let want = fuse_heads(&fm, &head.classifier, &head.heads).unwrap();
            for i in 0..c {
                assert!(
                    (g.value(logits).data()[n * c + i] - want[i]).abs() < 1e-9,
                    "sample {n} class {i}"
                );
            }
        }
    }

    #[test]
    fn temperature_serde_accepts_number_and_inf() {
        let fin: Temperature = serde_json::from_str("2.5").unwrap();
        assert!(matches!(fin, Temperature::Finite(t) if t == 2.5));
        let inf: Temperature = serde_json::from_str("\"inf\"").unwrap();
        assert!(matches!(inf, Temperature::Infinite));
        let round = serde_json::to_string(&inf).unwrap();
        assert_eq!(round, "\"inf\"");
    }
}
