//! Optimization: Adam with bias correction, the step-halving learning
//! rate schedule, and the fit loop with validation-based model selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, Arch, ModelConfig, ParamStore, Phase};
use crate::mosaic::{self, MosaicLayout};
use crate::tensor::Tensor;

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// initial learning rate
    pub lr0: f32,
    /// epochs between halvings of the learning rate
    pub halve_every: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub epochs: usize,
    pub seed: u64,
    pub validate_every: usize,
    /// `Some(c)`: random aligned crops of side `c` with rotation/flip
    /// augmentation; `None`: full images, no augmentation.
    pub augment_crop: Option<usize>,
}

impl Default for TrainConfig {
    /// Published training settings: batch 10, Adam(0.9, 0.999, 1e-8),
    /// initial rate 1e-4 halved every 2500 epochs, 120-pixel crops.
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            lr0: 1e-4,
            halve_every: 2500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 5000,
            seed: 0,
            validate_every: 50,
            augment_crop: Some(120),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.halve_every == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size, epochs, halve_every, validate_every must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("lr0 and eps must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{} must lie in (0, 1), got {}", name, b)));
            }
        }
        if let Some(c) = self.augment_crop {
            if c == 0 || c % 4 != 0 {
                return Err(Error::Config(format!("crop {} must be a positive multiple of 4", c)));
            }
        }
        Ok(())
    }
}

/// Per-parameter first/second moment estimates and the shared step count.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0f32; t.numel()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }
}

/// One Adam update with bias correction. Consumes (and thereby zeroes)
/// every parameter's gradient; a parameter without a gradient is an
/// error naming it.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig, lr: f32) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (name, param)) in store.iter_mut().enumerate() {
        let grad = param
            .take_grad()
            .ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = param.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Learning rate at `epoch`: `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f32 {
    cfg.lr0 * 0.5f32.powi((epoch / cfg.halve_every) as i32)
}

/// One history row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_psnr: f64,
}

impl FitReport {
    /// `epoch,lr,loss,val_psnr` CSV; the PSNR field is empty on epochs
    /// without validation.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,val_psnr\n");
        for row in &self.history {
            out.push_str(&format!(
                "{},{:e},{:.8},{}\n",
                row.epoch,
                row.lr,
                row.loss,
                row.val_psnr.map_or(String::new(), |p| format!("{:.6}", p)),
            ));
        }
        out
    }
}

fn stack_batch(items: &[(Tensor<f32>, Tensor<f32>)]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (xs, ys): (Vec<&Tensor<f32>>, Vec<&Tensor<f32>>) =
        items.iter().map(|(x, y)| (x, y)).unzip();
    let cat = |parts: &[&Tensor<f32>]| -> Result<Tensor<f32>> {
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(parts[0].shape());
        let mut data = Vec::with_capacity(parts[0].numel() * parts.len());
        for p in parts {
            if p.shape() != parts[0].shape() {
                return Err(Error::dim(
                    "stack_batch",
                    format!("mixed shapes {:?} vs {:?}", p.shape(), parts[0].shape()),
                ));
            }
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(shape, data)
    };
    Ok((cat(&xs)?, cat(&ys)?))
}

/// Network input for one sample under the configured formation.
fn model_input(zp: &Tensor<f32>, layout: &MosaicLayout, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    match cfg.mode {
        model::InputMode::ZeroPadded => Ok(zp.clone()),
        model::InputMode::Compact => mosaic::compact_from_zero_padded(zp, layout),
    }
}

/// Eval-mode prediction for one raw mosaic, clamped to `[0, 1]`.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    raw: &mosaic::RawMosaic,
    layout: &MosaicLayout,
) -> Result<Tensor<f32>> {
    let zp = mosaic::demux_zero_padded(raw, layout);
    let input = model_input(&zp, layout, cfg)?;
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batched = input.reshape(shape)?;
    let out = match cfg.arch {
        Arch::Rcan => model::rcan_forward(&batched, store, cfg, Phase::Eval)?,
        Arch::Tsrcan => model::tsrcan_forward(&batched, store, cfg, Phase::Eval)?.sr,
    };
    let spatial = [out.shape()[1], out.shape()[2], out.shape()[3]];
    let clamped: Vec<f32> = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(spatial.to_vec(), clamped)
}

/// Mean PSNR of eval-mode predictions over the given dataset indices.
pub fn evaluate_psnr(
    store: &ParamStore,
    cfg: &ModelConfig,
    dataset: &Dataset,
    indices: &[usize],
    layout: &MosaicLayout,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Training("evaluation split is empty".into()));
    }
    let mut acc = 0.0;
    for &i in indices {
        let sample = dataset.load_sample(i)?;
        let pred = predict(store, cfg, &sample.raw, layout)?;
        acc += metrics::psnr(&pred, &sample.hr_rgb, sample.mask.as_ref())?;
    }
    Ok(acc / indices.len() as f64)
}

/// Trains `model_cfg` on the dataset's train split, validating every
/// `validate_every` epochs and keeping the checkpoint with the highest
/// validation PSNR. Deterministic in `cfg.seed`.
///
/// Returns the best parameter store and the history. With `out_dir` set,
/// also writes `checkpoint/` and `history.csv` beneath it.
pub fn fit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    layout: &MosaicLayout,
    out_dir: Option<&Path>,
) -> Result<(ParamStore, FitReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.split.train.is_empty() || dataset.split.val.is_empty() {
        return Err(Error::Training("dataset needs non-empty train and val splits".into()));
    }

    // Desk-scale datasets fit in memory; load every training pair once.
    let train_pairs: Vec<(Tensor<f32>, Tensor<f32>)> = dataset
        .split
        .train
        .iter()
        .map(|&i| {
            let s = dataset.load_sample(i)?;
            Ok((mosaic::demux_zero_padded(&s.raw, layout), s.hr_rgb))
        })
        .collect::<Result<_>>()?;
    if let Some(crop) = cfg.augment_crop {
        for (zp, _) in &train_pairs {
            if crop > zp.shape()[1] || crop > zp.shape()[2] {
                return Err(Error::Config(format!(
                    "crop {} exceeds training image {}x{}",
                    crop,
                    zp.shape()[1],
                    zp.shape()[2]
                )));
            }
        }
    }

    let mut store = model::build(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&store);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (zp, hr) = &train_pairs[i];
                let (zp_a, hr_a) = match cfg.augment_crop {
                    Some(crop) => data::augment(zp, hr, layout, crop, &mut rng)?,
                    None => (zp.clone(), hr.clone()),
                };
                items.push((model_input(&zp_a, layout, model_cfg)?, hr_a));
            }
            let (x, target) = stack_batch(&items)?;
            store.zero_grads();
            let loss = match model_cfg.arch {
                Arch::Rcan => {
                    let sr = model::rcan_forward(&x, &store, model_cfg, Phase::Train)?;
                    sr.smooth_l1(&target)?
                }
                Arch::Tsrcan => {
                    let out = model::tsrcan_forward(&x, &store, model_cfg, Phase::Train)?;
                    model::loss(&out.sr_prime, &out.sr, &target)?
                }
            };
            let loss_val = loss.item()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {} batch {}",
                    loss_val, epoch, batches
                )));
            }
            loss.backward()?;
            adam_step(&mut store, &mut adam, cfg, lr)?;
            epoch_loss += loss_val;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;

        let val_psnr = if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs {
            let p = evaluate_psnr(&store, model_cfg, dataset, &dataset.split.val, layout)?;
            if best.as_ref().map_or(true, |(_, b, _)| p > *b) {
                best = Some((epoch, p, store.deep_clone()));
            }
            Some(p)
        } else {
            None
        };
        history.push(EpochLog { epoch, lr, loss: mean_loss, val_psnr });
    }

    let (best_epoch, best_val_psnr, best_store) =
        best.expect("at least the final epoch validates");
    let report = FitReport { history, best_epoch, best_val_psnr };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        model::save_checkpoint(dir.join("checkpoint"), &best_store, model_cfg, cfg.seed)?;
        std::fs::write(dir.join("history.csv"), report.history_csv())?;
    }
    Ok((best_store, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chroma::CmfTable;
    use crate::data::{generate_scene, make_split, save_sample, write_split, SceneSpec};

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr0: 1e-3,
            halve_every: 1000,
            epochs: 2,
            seed: 3,
            validate_every: 1,
            augment_crop: None,
            ..TrainConfig::default()
        }
    }

    fn temp_dataset(name: &str, n: usize, h: usize, w: usize) -> Dataset {
        let layout = MosaicLayout::standard();
        let cmf = CmfTable::builtin();
        let root = std::env::temp_dir().join(name);
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let mut ids = Vec::new();
        for i in 0..n as u64 {
            let spec = SceneSpec::new(1000 + i, h, w).unwrap();
            let mut s = generate_scene(&spec, &layout, &cmf).unwrap();
            s.id = format!("sample_{:04}", i);
            save_sample(&root, &s, &spec).unwrap();
            ids.push(s.id.clone());
        }
        write_split(&root, &ids, &make_split(n, 1).unwrap()).unwrap();
        Dataset::load(&root).unwrap()
    }

    #[test]
    fn lr_schedule_halves() {
        let cfg = TrainConfig { lr0: 1e-4, halve_every: 2500, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(2499, &cfg), 1e-4);
        assert_eq!(lr_at(2500, &cfg), 5e-5);
        assert_eq!(lr_at(7499, &cfg), 2.5e-5);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let cfg = quick_cfg();
        let mut store = model::build(&ModelConfig::tiny(), 0).unwrap();
        // populate zero gradients by construction
        for (_, p) in store.iter() {
            let x = p.relu().unwrap();
            let zeros = Tensor::zeros(x.shape().to_vec());
            x.mul(&zeros).unwrap().sum_all().unwrap().backward().unwrap();
        }
        let before: Vec<Vec<f32>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut adam = AdamState::new(&store);
        adam_step(&mut store, &mut adam, &cfg, 1e-3).unwrap();
        assert_eq!(adam.t, 1);
        for ((_, t), b) in store.iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }

    #[test]
    fn adam_missing_grad_names_parameter() {
        let cfg = quick_cfg();
        let mut store = model::build(&ModelConfig::tiny(), 0).unwrap();
        let mut adam = AdamState::new(&store);
        let err = adam_step(&mut store, &mut adam, &cfg, 1e-3).unwrap_err();
        assert!(err.to_string().contains("head.conv1.weight"), "{}", err);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // constant gradient: the first bias-corrected step is
        // -lr * g/(|g| + ~eps), i.e. lr in magnitude
        let cfg = quick_cfg();
        let mut store = ParamStoreFixture::single(2.0);
        let mut adam = AdamState::new(&store.0);
        set_grad(&store.0, vec![0.7]);
        adam_step(&mut store.0, &mut adam, &cfg, 1e-3).unwrap();
        let got = store.0.get("w.weight").unwrap().data()[0];
        assert!((got - (2.0 - 1e-3)).abs() < 1e-6, "{}", got);
    }

    #[test]
    fn adam_scale_invariant_first_step() {
        let cfg = quick_cfg();
        let step_for = |g: f32| -> f32 {
            let mut store = ParamStoreFixture::single(1.0);
            let mut adam = AdamState::new(&store.0);
            set_grad(&store.0, vec![g]);
            adam_step(&mut store.0, &mut adam, &cfg, 1e-3).unwrap();
            1.0 - store.0.get("w.weight").unwrap().data()[0]
        };
        let (a, b) = (step_for(0.3), step_for(3.0));
        assert!((a - b).abs() / a.abs() < 0.01, "{} vs {}", a, b);
    }

    /// Ten steps on a 2-parameter quadratic against a scalar reference
    /// implementation of the update equations.
    #[test]
    fn adam_matches_reference_updates() {
        let cfg = quick_cfg();
        let lr = 0.05f32;
        let mut store = ParamStoreFixture::pair(1.5, -2.0);
        let mut adam = AdamState::new(&store.0);

        // reference state
        let mut w = [1.5f32, -2.0];
        let mut m = [0f32; 2];
        let mut v = [0f32; 2];
        for t in 1..=10 {
            // loss = w0^2 + w1^2 -> grad = 2w
            let g = [2.0 * w[0], 2.0 * w[1]];
            set_grad(&store.0, vec![g[0]]);
            set_grad_named(&store.0, "u.weight", vec![g[1]]);
            adam_step(&mut store.0, &mut adam, &cfg, lr).unwrap();
            for j in 0..2 {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / (1.0 - cfg.beta1.powi(t));
                let vh = v[j] / (1.0 - cfg.beta2.powi(t));
                w[j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        let got0 = store.0.get("w.weight").unwrap().data()[0];
        let got1 = store.0.get("u.weight").unwrap().data()[0];
        assert!((got0 - w[0]).abs() < 1e-7, "{} vs {}", got0, w[0]);
        assert!((got1 - w[1]).abs() < 1e-7, "{} vs {}", got1, w[1]);
    }

    /// Minimal stores for optimizer unit tests.
    struct ParamStoreFixture(ParamStore);
    impl ParamStoreFixture {
        fn single(w: f32) -> Self {
            let mut s = model::build(&ModelConfig::tiny(), 0).unwrap();
            s = strip_to(s, &["w.weight"], w);
            ParamStoreFixture(s)
        }
        fn pair(w: f32, u: f32) -> Self {
            let mut s = model::build(&ModelConfig::tiny(), 0).unwrap();
            s = strip_to(s, &["w.weight", "u.weight"], w);
            s.set_data("u.weight", vec![u]).unwrap();
            ParamStoreFixture(s)
        }
    }

    /// Rebuilds a store holding only scalar parameters with the given names.
    fn strip_to(_donor: ParamStore, names: &[&str], init: f32) -> ParamStore {
        let mut out = model::ParamStore::empty_for_tests();
        for n in names {
            out.insert_for_tests(n, Tensor::param(vec![1], vec![init]).unwrap());
        }
        out
    }

    fn set_grad(store: &ParamStore, g: Vec<f32>) {
        set_grad_named(store, store.names()[0].as_str(), g);
    }

    fn set_grad_named(store: &ParamStore, name: &str, g: Vec<f32>) {
        let p = store.get(name).unwrap();
        p.zero_grad();
        let gt = Tensor::from_vec(p.shape().to_vec(), g).unwrap();
        p.mul(&gt).unwrap().sum_all().unwrap().backward().unwrap();
    }

    #[test]
    fn frozen_batch_loss_mostly_decreases() {
        let layout = MosaicLayout::standard();
        let cmf = CmfTable::builtin();
        let model_cfg = ModelConfig::tiny();
        let cfg = TrainConfig { lr0: 2e-3, ..quick_cfg() };
        let spec = SceneSpec::new(7, 16, 16).unwrap();
        let s = generate_scene(&spec, &layout, &cmf).unwrap();
        let zp = mosaic::demux_zero_padded(&s.raw, &layout);
        let x = zp.reshape(vec![1, 16, 16, 16]).unwrap();
        let mut tshape = vec![1];
        tshape.extend_from_slice(s.hr_rgb.shape());
        let target = s.hr_rgb.reshape(tshape).unwrap();

        let mut store = model::build(&model_cfg, 2).unwrap();
        let mut adam = AdamState::new(&store);
        let mut losses = Vec::new();
        for _ in 0..21 {
            store.zero_grads();
            let out = model::tsrcan_forward(&x, &store, &model_cfg, Phase::Train).unwrap();
            let l = model::loss(&out.sr_prime, &out.sr, &target).unwrap();
            losses.push(l.item().unwrap() as f64);
            l.backward().unwrap();
            adam_step(&mut store, &mut adam, &cfg, cfg.lr0).unwrap();
        }
        let decreases = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(decreases >= 16, "only {} of 20 steps decreased: {:?}", decreases, losses);
    }

    #[test]
    fn fit_deterministic_and_argmax_contract() {
        let dataset = temp_dataset("snapsr_train_det", 4, 16, 16);
        let layout = MosaicLayout::standard();
        let model_cfg = ModelConfig::tiny();
        let cfg = quick_cfg();
        let (_, r1) = fit(&model_cfg, &cfg, &dataset, &layout, None).unwrap();
        let (_, r2) = fit(&model_cfg, &cfg, &dataset, &layout, None).unwrap();
        assert_eq!(r1.history, r2.history);
        assert_eq!(r1.history_csv(), r2.history_csv());
        let best = r1.best_val_psnr;
        for row in &r1.history {
            if let Some(p) = row.val_psnr {
                assert!(best >= p);
            }
        }
    }

    #[test]
    fn checkpoint_reload_reproduces_val_psnr() {
        let dataset = temp_dataset("snapsr_train_ckpt", 4, 16, 16);
        let layout = MosaicLayout::standard();
        let model_cfg = ModelConfig::tiny();
        let cfg = quick_cfg();
        let out = std::env::temp_dir().join("snapsr_train_ckpt_out");
        let _ = std::fs::remove_dir_all(&out);
        let (best, report) = fit(&model_cfg, &cfg, &dataset, &layout, Some(&out)).unwrap();
        let direct = evaluate_psnr(&best, &model_cfg, &dataset, &dataset.split.val, &layout).unwrap();
        assert_eq!(direct.to_bits(), report.best_val_psnr.to_bits());
        let (loaded, loaded_cfg, _) = model::load_checkpoint(out.join("checkpoint")).unwrap();
        let reloaded = evaluate_psnr(&loaded, &loaded_cfg, &dataset, &dataset.split.val, &layout).unwrap();
        assert_eq!(reloaded.to_bits(), report.best_val_psnr.to_bits());
    }

    #[test]
    fn fit_rejects_oversized_crop() {
        let dataset = temp_dataset("snapsr_train_crop", 4, 16, 16);
        let layout = MosaicLayout::standard();
        let cfg = TrainConfig { augment_crop: Some(32), ..quick_cfg() };
        assert!(fit(&ModelConfig::tiny(), &cfg, &dataset, &layout, None).is_err());
    }
}
