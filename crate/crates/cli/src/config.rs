//! Effective run configuration: defaults, then the config file, then flags.

use std::path::Path;
use std::str::FromStr;

use depthforge::eval::{EvalProtocol, DEFAULT_CAP};
use depthforge::io::{ConfigFile, Section};
use depthforge::training::{
    generate_synthetic_scene, three_plane_scene_set, SceneSample, SceneSpec, TrainConfig,
};
use depthforge::units::NetConfig;
use depthforge::{Error, Result};
use serde::Serialize;

pub const SEED_ENV: &str = "DEPTHFORGE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    ThreePlanes,
    Plane,
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "three_planes" => Ok(Self::ThreePlanes),
            "plane" => Ok(Self::Plane),
            _ => Err(format!("unknown scene kind {s:?} (expected three_planes or plane)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub count: usize,
    pub seed: u64,
    /// Fronto-parallel scenes only.
    pub plane_depth: f64,
    pub focal: f64,
    pub baseline: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::ThreePlanes,
            count: 8,
            seed: 0,
            plane_depth: 10.0,
            focal: 100.0,
            baseline: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub cap: f64,
    pub scales: Vec<f64>,
    pub per_class: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            scales: vec![1.0, 0.7, 0.4, 0.1],
            per_class: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub scenes: SceneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            net: NetConfig::tiny(),
            scenes: SceneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn set<T: FromStr>(s: &mut Section, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = s.take(key)? {
        *slot = v;
    }
    Ok(())
}

fn set_list<T: FromStr>(s: &mut Section, key: &str, slot: &mut Vec<T>) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = s.take_list(key)? {
        *slot = v;
    }
    Ok(())
}

impl RunConfig {
    /// Defaults overlaid with `path`, then with the seed environment variable.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            cfg.apply_file(ConfigFile::load(path)?)?;
        }
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn apply_file(&mut self, mut file: ConfigFile) -> Result<()> {
        let mut s = file.section("train");
        let t = &mut self.train;
        set(&mut s, "lr", &mut t.lr)?;
        set(&mut s, "beta1", &mut t.beta1)?;
        set(&mut s, "beta2", &mut t.beta2)?;
        set(&mut s, "batch_size", &mut t.batch_size)?;
        set(&mut s, "iterations", &mut t.iterations)?;
        set(&mut s, "seed", &mut t.seed)?;
        set(&mut s, "height", &mut t.height)?;
        set(&mut s, "width", &mut t.width)?;
        set(&mut s, "mode", &mut t.mode)?;
        set(&mut s, "pose_source", &mut t.pose_source)?;
        set(&mut s, "automask", &mut t.automask)?;
        set(&mut s, "checkpoint_every", &mut t.checkpoint_every)?;
        s.finish()?;

        let mut s = file.section("loss");
        let w = &mut self.train.weights;
        set(&mut s, "lambda_seg", &mut w.lambda_seg)?;
        set(&mut s, "lambda_smooth", &mut w.lambda_smooth)?;
        set(&mut s, "alpha_ssim", &mut w.alpha_ssim)?;
        s.finish()?;

        let mut s = file.section("net");
        if let Some(preset) = s.take::<String>("preset")? {
            self.net = match preset.as_str() {
                "tiny" => NetConfig::tiny(),
                "full" => NetConfig::default(),
                other => return Err(Error::Config(format!("unknown net.preset {other:?} (expected tiny or full)"))),
            };
        }
        let n = &mut self.net;
        set_list(&mut s, "enc_channels", &mut n.enc_channels)?;
        set_list(&mut s, "dec_channels", &mut n.dec_channels)?;
        set_list(&mut s, "pose_channels", &mut n.pose_channels)?;
        set_list(&mut s, "apu_stages", &mut n.apu_stages)?;
        set(&mut s, "blocks_per_stage", &mut n.blocks_per_stage)?;
        set(&mut s, "num_classes", &mut n.num_classes)?;
        set(&mut s, "disp_bias_init", &mut n.disp_bias_init)?;
        set(&mut s, "fusion", &mut n.fusion)?;
        s.finish()?;

        let mut s = file.section("scenes");
        let c = &mut self.scenes;
        set(&mut s, "kind", &mut c.kind)?;
        set(&mut s, "count", &mut c.count)?;
        set(&mut s, "seed", &mut c.seed)?;
        set(&mut s, "plane_depth", &mut c.plane_depth)?;
        set(&mut s, "focal", &mut c.focal)?;
        set(&mut s, "baseline", &mut c.baseline)?;
        s.finish()?;

        let mut s = file.section("eval");
        let e = &mut self.eval;
        set(&mut s, "cap", &mut e.cap)?;
        set_list(&mut s, "scales", &mut e.scales)?;
        set(&mut s, "per_class", &mut e.per_class)?;
        s.finish()?;

        file.section("").finish()?;
        file.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.net.validate()?;
        self.protocol().validate()?;
        if self.scenes.count == 0 {
            return Err(Error::Config("scenes.count must be positive".into()));
        }
        if let Some(s) = self.eval.scales.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!("eval.scales entry {s} outside (0, 1]")));
        }
        let m = self.net.input_multiple();
        if self.train.height % m != 0 || self.train.width % m != 0 {
            return Err(Error::Config(format!(
                "train.height and train.width must be multiples of {m}, got {}x{}",
                self.train.height, self.train.width
            )));
        }
        Ok(())
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol::for_mode(self.train.mode, self.eval.cap)
    }

    pub fn scene_set(&self) -> Result<Vec<SceneSample>> {
        let (t, c) = (&self.train, &self.scenes);
        match c.kind {
            SceneKind::ThreePlanes => three_plane_scene_set(t.width, t.height, t.mode, c.count, c.seed),
            SceneKind::Plane => {
                let spec = SceneSpec::fronto_parallel(t.width, t.height, c.focal, c.baseline, c.plane_depth);
                (0..c.count as u64).map(|i| generate_synthetic_scene(&spec, t.mode, c.seed + i)).collect()
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
