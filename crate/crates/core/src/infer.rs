//! RGB-only inference from a checkpoint: resize to the network side,
//! forward, sigmoid, and rescale back to the original size.

use std::path::{Path, PathBuf};

use crate::config::{RunConfig, RESOLVED_FILE};
use crate::data::pnm;
use crate::data::rescale_prediction;
use crate::decoder::{Dftr, ModelConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{ParamStore, Session};
use crate::train::checkpoint::Checkpoint;

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Saliency probabilities at the input size.
    pub saliency: Image,
    /// Depth estimate at the input size, when the model has a depth head.
    pub depth: Option<Image>,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: Dftr,
    pub params: ParamStore<f32>,
}

impl Predictor {
    /// Checkpoint parameters bound to the model they were trained for.
    pub fn new(model_cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_model(model_cfg)?;
        let (model, init) = Dftr::new(model_cfg, 0)?;
        let mut params = init.cast::<f32>();
        ckpt.load_params(&mut params)?;
        Ok(Predictor { model, params })
    }

    /// Read a checkpoint and its model configuration: `config` when given,
    /// otherwise `config.resolved` beside the checkpoint.
    pub fn load(ckpt_path: &Path, config: Option<&Path>) -> Result<Self> {
        let cfg_path = match config {
            Some(p) => p.to_path_buf(),
            None => ckpt_path.parent().unwrap_or(Path::new(".")).join(RESOLVED_FILE),
        };
        let cfg = RunConfig::load(&cfg_path)?;
        let ckpt = Checkpoint::load(ckpt_path)?;
        Self::new(&cfg.model, &ckpt)
    }

    pub fn predict(&self, rgb: &Image) -> Result<Prediction> {
        if rgb.channels != 3 {
            return Err(Error::shape("predict", format!("expected an rgb image, got {} channels", rgb.channels)));
        }
        let (w, h) = rgb.size();
        let side = self.model.input_side();
        let input = rgb.resize_bilinear(side, side).to_tensor::<f32>();
        let mut s = Session::inference(&self.params);
        let p = self.model.forward(&mut s, &input)?;
        let prob = s.g.sigmoid(p.saliency)?;
        let saliency = rescale_prediction(&Image::from_map(s.g.value(prob))?, w, h);
        let depth = match p.depth {
            Some(d) => Some(rescale_prediction(&Image::from_map(s.g.value(d))?, w, h)),
            None => None,
        };
        Ok(Prediction { saliency, depth })
    }
}

/// `.ppm` files of `input`, or of `input/rgb` when that exists, sorted by name.
pub fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    let rgb = input.join("rgb");
    let dir = if rgb.is_dir() { rgb } else { input.to_path_buf() };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|x| x == "ppm") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Write `<out>/<name>.pgm` for every input image, plus
/// `<out>/depth/<name>.pgm` when `save_depth` is set. Returns the names.
pub fn infer_dir(predictor: &Predictor, input: &Path, out: &Path, save_depth: bool) -> Result<Vec<String>> {
    let inputs = list_inputs(input)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let depth_dir = out.join("depth");
    if save_depth {
        std::fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    }
    let mut names = Vec::new();
    for path in inputs {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let rgb = pnm::load_ppm(&path)?;
        let pred = predictor.predict(&rgb).map_err(|e| e.context(path.display().to_string()))?;
        pnm::save_pgm(&out.join(format!("{name}.pgm")), &pred.saliency)?;
        if let (true, Some(depth)) = (save_depth, &pred.depth) {
            pnm::save_pgm(&depth_dir.join(format!("{name}.pgm")), depth)?;
        }
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_dataset, SceneSpec};
    use crate::train::{Sgd, TrainConfig};

    fn tiny() -> ModelConfig {
        crate::decoder::tests::tiny_config()
    }

    fn fresh_checkpoint(cfg: &ModelConfig) -> Checkpoint {
        let (_, store) = Dftr::new(cfg, 0).unwrap();
        let store = store.cast::<f32>();
        let opt = Sgd::new(&store, 0.9, 0.0);
        Checkpoint::capture(cfg, 0, 0, &store, &opt)
    }

    #[test]
    fn outputs_match_input_size_and_range() {
        let p = Predictor::new(&tiny(), &fresh_checkpoint(&tiny())).unwrap();
        let rgb = Image::filled(45, 23, 3, 0.4);
        let out = p.predict(&rgb).unwrap();
        assert_eq!(out.saliency.size(), (45, 23));
        assert_eq!(out.saliency.channels, 1);
        assert!(out.saliency.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.depth.unwrap().size(), (45, 23));
        assert!(p.predict(&Image::filled(8, 8, 1, 0.0)).is_err());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let mut other = tiny();
        other.decoder.use_mls = false;
        let err = Predictor::new(&other, &fresh_checkpoint(&tiny())).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)), "{err}");
    }

    #[test]
    fn depth_output_leaves_saliency_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_dataset(&data, &SceneSpec::new(24, 3), 2).unwrap();
        let cfg = tiny();
        let ckpt_dir = dir.path().join("run");
        std::fs::create_dir_all(&ckpt_dir).unwrap();
        let run = RunConfig {
            model: cfg.clone(),
            train: TrainConfig::default(),
            ..Default::default()
        };
        std::fs::write(ckpt_dir.join(RESOLVED_FILE), run.to_text()).unwrap();
        let ckpt = ckpt_dir.join("model.ckpt");
        fresh_checkpoint(&cfg).save(&ckpt).unwrap();
        let p = Predictor::load(&ckpt, None).unwrap();

        let (plain, with_depth) = (dir.path().join("a"), dir.path().join("b"));
        let names = infer_dir(&p, &data, &plain, false).unwrap();
        assert_eq!(names, ["000000", "000001"]);
        infer_dir(&p, &data, &with_depth, true).unwrap();
        assert!(!plain.join("depth").exists());
        for n in &names {
            let file = format!("{n}.pgm");
            assert_eq!(std::fs::read(plain.join(&file)).unwrap(), std::fs::read(with_depth.join(&file)).unwrap());
            let d = pnm::load_pgm(&with_depth.join("depth").join(&file)).unwrap();
            assert_eq!(d.size(), (24, 24));
        }
    }
}
