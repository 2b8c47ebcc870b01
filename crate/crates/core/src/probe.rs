//! Linear probes over encoder layers: how much position information do
//! visual-token features retain at each depth?
//!
//! Each probe is multinomial logistic regression from a token's feature
//! vector to its grid position, trained by full-batch gradient descent.
//! Held-out accuracy per layer is the retention measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, softmax_rows, Matrix, Rng};
use crate::model::{encode_image, ModelConfig, ModelWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seed for the train/held-out image split and probe init.
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { epochs: 500, learning_rate: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerProbeResult {
    pub layer: usize,
    /// Held-out top-1 accuracy.
    pub accuracy: f64,
    /// Final training loss.
    pub final_loss: f64,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    /// One entry per encoder layer, layer 0 = embeddings + positional.
    pub layers: Vec<LayerProbeResult>,
}

impl ProbeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One feature/label row per visual token per image, taken from encoder
/// layer `layer` of the trace (0 = input embeddings).
pub fn collect_features(
    images: &[Vec<usize>],
    layer: usize,
    w: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<(Matrix, Vec<usize>)> {
    if layer > cfg.encoder_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (encoder has layers 0..={})",
            cfg.encoder_layers
        )));
    }
    let n = cfg.num_visual();
    let d = cfg.d_model;
    let mut feats = Matrix::zeros(images.len() * n, d);
    let mut labels = Vec::with_capacity(images.len() * n);
    for (m, image) in images.iter().enumerate() {
        let enc = encode_image(image, w, cfg)?;
        let h = &enc.trace.layers[layer];
        for i in 0..n {
            // row 0 of the trace is CLS; visual tokens start at 1
            feats.row_mut(m * n + i).copy_from_slice(h.row(i + 1));
            labels.push(i);
        }
    }
    Ok((feats, labels))
}

/// Linear classifier with the bias folded in as an extra input column.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// `(d+1) x classes`; last row is the bias.
    pub params: Matrix,
}

fn with_bias_column(features: &Matrix) -> Matrix {
    let mut x = Matrix::zeros(features.rows(), features.cols() + 1);
    for r in 0..features.rows() {
        x.row_mut(r)[..features.cols()].copy_from_slice(features.row(r));
        x.row_mut(r)[features.cols()] = 1.0;
    }
    x
}

/// Mean cross-entropy and its gradient for parameters `params` on
/// bias-augmented inputs `x`.
pub fn probe_loss_and_grad(
    params: &Matrix,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix)> {
    if x.rows() != labels.len() || x.rows() == 0 {
        return Err(Error::shape("probe: features/labels mismatch or empty"));
    }
    let classes = params.cols();
    let m = x.rows() as f64;
    let mut probs = softmax_rows(&x.matmul(params));
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} >= classes {classes}")));
        }
        loss -= probs.get(r, y).max(1e-300).ln();
        probs.set(r, y, probs.get(r, y) - 1.0);
    }
    let grad = x.transpose().matmul(&probs).scale(1.0 / m);
    Ok((loss / m, grad))
}

/// Full-batch gradient descent; deterministic given the seed.
pub fn train_probe(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
    rng: &mut Rng,
) -> Result<(LinearProbe, f64)> {
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("probe needs at least two label classes"));
    }
    let x = with_bias_column(features);
    let mut params = Matrix::zeros(features.cols() + 1, classes);
    rng.fill_gaussian(params.as_mut_slice(), 0.01);
    let mut loss = f64::INFINITY;
    for _ in 0..opts.epochs {
        let (l, grad) = probe_loss_and_grad(&params, &x, labels)?;
        params.add_assign(&grad.scale(-opts.learning_rate));
        loss = l;
    }
    if opts.epochs == 0 {
        loss = probe_loss_and_grad(&params, &x, labels)?.0;
    }
    Ok((LinearProbe { params }, loss))
}

impl LinearProbe {
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = with_bias_column(features).matmul(&self.params);
        (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
    }

    pub fn accuracy(&self, features: &Matrix, labels: &[usize]) -> Result<f64> {
        let preds = self.predict(features)?;
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Probe every encoder layer with a seeded 80/20 image split.
pub fn probe_all_layers(
    images: &[Vec<usize>],
    w: &ModelWeights,
    cfg: &ModelConfig,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    if images.len() < 5 {
        return Err(Error::invalid("probe needs at least 5 images for an 80/20 split"));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    Rng::new(opts.seed).shuffle(&mut order);
    let cut = (images.len() * 4) / 5;
    let train_imgs: Vec<Vec<usize>> = order[..cut].iter().map(|&i| images[i].clone()).collect();
    let hold_imgs: Vec<Vec<usize>> = order[cut..].iter().map(|&i| images[i].clone()).collect();
    let classes = cfg.num_visual();
    let mut layers = Vec::with_capacity(cfg.encoder_layers + 1);
    for layer in 0..=cfg.encoder_layers {
        let (ftr, ltr) = collect_features(&train_imgs, layer, w, cfg)?;
        let (fho, lho) = collect_features(&hold_imgs, layer, w, cfg)?;
        let mut rng = Rng::new(opts.seed).derive(layer as u64);
        let (probe, final_loss) = train_probe(&ftr, &ltr, classes, opts, &mut rng)?;
        layers.push(LayerProbeResult {
            layer,
            accuracy: probe.accuracy(&fho, &lho)?,
            final_loss,
            train_rows: ltr.len(),
            holdout_rows: lho.len(),
        });
    }
    Ok(ProbeReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::data::generate_dataset;

    fn setup(images: usize) -> (ModelConfig, ModelWeights, Vec<Vec<usize>>) {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, &mut Rng::new(2));
        let imgs = generate_dataset(images, &cfg, &mut Rng::new(3))
            .unwrap()
            .into_iter()
            .map(|e| e.image)
            .collect();
        (cfg, w, imgs)
    }

    #[test]
    fn feature_counting_and_labels() {
        let (cfg, w, imgs) = setup(7);
        let (f, l) = collect_features(&imgs, 1, &w, &cfg).unwrap();
        assert_eq!(f.rows(), 7 * cfg.num_visual());
        assert_eq!(l.len(), f.rows());
        assert_eq!(&l[..cfg.num_visual()], &(0..cfg.num_visual()).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn layer_zero_is_embedding_plus_positional() {
        let (cfg, w, imgs) = setup(1);
        let (f, _) = collect_features(&imgs, 0, &w, &cfg).unwrap();
        for (i, &c) in imgs[0].iter().enumerate() {
            for j in 0..cfg.d_model {
                let expect = w.color_emb.get(c, j) + w.pos_emb.get(i, j);
                assert_eq!(f.get(i, j), expect);
            }
        }
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let (cfg, w, imgs) = setup(1);
        assert!(collect_features(&imgs, cfg.encoder_layers + 1, &w, &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let mut feats = Matrix::zeros(12, 5);
        rng.fill_gaussian(feats.as_mut_slice(), 1.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let x = with_bias_column(&feats);
        let mut params = Matrix::zeros(6, 3);
        rng.fill_gaussian(params.as_mut_slice(), 0.5);
        let (_, grad) = probe_loss_and_grad(&params, &x, &labels).unwrap();
        let eps = 1e-6;
        for probe_idx in [0usize, 7, 17] {
            let mut pp = params.clone();
            pp.as_mut_slice()[probe_idx] += eps;
            let mut pm = params.clone();
            pm.as_mut_slice()[probe_idx] -= eps;
            let lp = probe_loss_and_grad(&pp, &x, &labels).unwrap().0;
            let lm = probe_loss_and_grad(&pm, &x, &labels).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grad.as_slice()[probe_idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-6,
                "param {probe_idx}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn separable_two_class_set_is_learned_perfectly() {
        let mut feats = Matrix::zeros(20, 2);
        let mut labels = Vec::new();
        for i in 0..20 {
            let cls = i % 2;
            feats.row_mut(i)[0] = if cls == 0 { -2.0 } else { 2.0 };
            feats.row_mut(i)[1] = i as f64 * 0.01; // noise dimension
            labels.push(cls);
        }
        let opts = ProbeOptions { epochs: 300, learning_rate: 0.5, seed: 1 };
        let (probe, _) = train_probe(&feats, &labels, 2, &opts, &mut Rng::new(1)).unwrap();
        assert_eq!(probe.accuracy(&feats, &labels).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_gives_chance_accuracy() {
        let (cfg, w, imgs) = setup(20);
        let (f, l) = collect_features(&imgs, 0, &w, &cfg).unwrap();
        let opts = ProbeOptions { epochs: 0, ..Default::default() };
        let (probe, _) = train_probe(&f, &l, cfg.num_visual(), &opts, &mut Rng::new(4)).unwrap();
        let acc = probe.accuracy(&f, &l).unwrap();
        let chance = 1.0 / cfg.num_visual() as f64;
        assert!(acc < 3.0 * chance, "untrained probe accuracy {acc} vs chance {chance}");
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let (cfg, w, imgs) = setup(10);
        let (f, l) = collect_features(&imgs, 1, &w, &cfg).unwrap();
        let x = with_bias_column(&f);
        let mut params = Matrix::zeros(cfg.d_model + 1, cfg.num_visual());
        Rng::new(5).fill_gaussian(params.as_mut_slice(), 0.01);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (loss, grad) = probe_loss_and_grad(&params, &x, &l).unwrap();
            assert!(loss <= prev + 1e-8, "loss increased: {prev} -> {loss}");
            params.add_assign(&grad.scale(-0.1));
            prev = loss;
        }
    }

    #[test]
    fn single_class_rejected() {
        let feats = Matrix::zeros(4, 2);
        assert!(train_probe(&feats, &[1, 1, 1, 1], 2, &ProbeOptions::default(), &mut Rng::new(0))
            .is_err());
    }

    #[test]
    fn report_covers_all_layers_and_layer0_is_decodable() {
        let (cfg, w, imgs) = setup(40);
        let report = probe_all_layers(&imgs, &w, &cfg, &ProbeOptions::default()).unwrap();
        assert_eq!(report.layers.len(), cfg.encoder_layers + 1);
        assert!(
            report.layers[0].accuracy >= 0.99,
            "layer-0 probe accuracy {}",
            report.layers[0].accuracy
        );
        let json = report.to_json().unwrap();
        assert!(json.contains("\"accuracy\""));
    }
}
