//! On-disk synthetic benchmark: source day split, coarsely aligned target
//! day/night pairs (night labels sealed away), and a labelled night test split.

use super::scene::{
    generate_scene, render_day, render_night, Domain, DomainSample, NightConfig, SceneConfig,
};
use super::taxonomy::Taxonomy;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{dsrt, LabelMap, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_source: usize,
    pub num_target: usize,
    pub num_test: usize,
    pub scene: SceneConfig,
    pub night: NightConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            num_source: 200,
            num_target: 200,
            num_test: 50,
            scene: SceneConfig::default(),
            night: NightConfig::default(),
        }
    }
}

pub const SEALED_TARGET_LABELS: &str = "sealed/target_night_lbl.dsrt";

fn item_path(dir: &Path, split: &str, prefix: &str, i: usize) -> PathBuf {
    dir.join(split).join(format!("{prefix}_{i:05}.dsrt"))
}

/// Scene seed and night-rendering seed for item `i` of a split.
pub fn item_seeds(master: u64, split: u64, night_split: u64, i: usize) -> (u64, u64) {
    (
        rng::derive(master, &[split, i as u64]),
        rng::derive(master, &[night_split, i as u64]),
    )
}

pub fn source_sample(cfg: &DatasetConfig, taxonomy: &Taxonomy, i: usize) -> Result<DomainSample> {
    let (seed, _) = item_seeds(cfg.seed, stream::SOURCE, stream::SOURCE, i);
    let spec = generate_scene(seed, &cfg.scene, taxonomy)?;
    Ok(render_day(&spec))
}

/// Target pair `i`: day rendering and the coarsely aligned night rendering.
pub fn target_pair(
    cfg: &DatasetConfig,
    taxonomy: &Taxonomy,
    i: usize,
) -> Result<(DomainSample, DomainSample)> {
    let (seed, night_seed) = item_seeds(cfg.seed, stream::TARGET, stream::TARGET_NIGHT, i);
    let spec = generate_scene(seed, &cfg.scene, taxonomy)?;
    let mut day = render_day(&spec);
    day.domain = Domain::TargetDay;
    Ok((day, render_night(&spec, night_seed, &cfg.night)))
}

pub fn test_sample(cfg: &DatasetConfig, taxonomy: &Taxonomy, i: usize) -> Result<DomainSample> {
    let (seed, night_seed) = item_seeds(cfg.seed, stream::TEST, stream::TEST_NIGHT, i);
    let spec = generate_scene(seed, &cfg.scene, taxonomy)?;
    Ok(render_night(&spec, night_seed, &cfg.night))
}

/// Flat `key = value` manifest with `#` comments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("manifest line {}: expected key = value", n + 1))
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# synthetic day/night segmentation benchmark\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("manifest missing {key}")))?
            .parse()
            .map_err(|e| Error::Config(format!("manifest {key}: {e}")))
    }
}

fn manifest_for(cfg: &DatasetConfig) -> Manifest {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("format", "DSRT v1".into());
    put("seed", cfg.seed.to_string());
    put("width", cfg.scene.width.to_string());
    put("height", cfg.scene.height.to_string());
    put("num_source", cfg.num_source.to_string());
    put("num_target", cfg.num_target.to_string());
    put("num_test", cfg.num_test.to_string());
    put("object_prob", cfg.scene.object_prob.to_string());
    put("max_per_class", cfg.scene.max_per_class.to_string());
    put("long_tail_prob", cfg.scene.long_tail_prob.to_string());
    put("misalign_px", cfg.night.misalign_px.to_string());
    put("night_gamma", cfg.night.gamma.to_string());
    put(
        "night_channel_scale",
        format!(
            "{},{},{}",
            cfg.night.channel_scale[0], cfg.night.channel_scale[1], cfg.night.channel_scale[2]
        ),
    );
    put("night_noise_sigma", cfg.night.noise_sigma.to_string());
    put("night_max_glows", cfg.night.max_glows.to_string());
    Manifest { entries: m }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the whole benchmark under `out_dir` and returns its manifest.
pub fn build_dataset(cfg: &DatasetConfig, taxonomy: &Taxonomy, out_dir: &Path) -> Result<Manifest> {
    if cfg.num_source == 0 {
        return Err(Error::invalid(
            "build_dataset",
            "source split must not be empty",
        ));
    }
    for sub in ["source", "target", "test", "sealed"] {
        mkdir(&out_dir.join(sub))?;
    }
    for i in 0..cfg.num_source {
        let s = source_sample(cfg, taxonomy, i)?;
        dsrt::write_file(&item_path(out_dir, "source", "img", i), &s.image)?;
        dsrt::write_file(&item_path(out_dir, "source", "lbl", i), &s.label)?;
    }
    let mut sealed = Vec::with_capacity(cfg.num_target);
    for i in 0..cfg.num_target {
        let (day, night) = target_pair(cfg, taxonomy, i)?;
        dsrt::write_file(&item_path(out_dir, "target", "day", i), &day.image)?;
        dsrt::write_file(&item_path(out_dir, "target", "night", i), &night.image)?;
        sealed.push(night.label);
    }
    if !sealed.is_empty() {
        dsrt::write_file(
            &out_dir.join(SEALED_TARGET_LABELS),
            &Tensor::stack(&sealed)?,
        )?;
    }
    for i in 0..cfg.num_test {
        let s = test_sample(cfg, taxonomy, i)?;
        dsrt::write_file(&item_path(out_dir, "test", "night", i), &s.image)?;
        dsrt::write_file(&item_path(out_dir, "test", "lbl", i), &s.label)?;
    }
    let manifest = manifest_for(cfg);
    let path = out_dir.join("manifest.cfg");
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A benchmark loaded into memory. Target night labels are not loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub source: Vec<(Tensor<f32>, LabelMap)>,
    pub target: Vec<(Tensor<f32>, Tensor<f32>)>,
    pub test: Vec<(Tensor<f32>, LabelMap)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.cfg");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = Manifest::parse(&text)?;
        let (ns, nt, ne) = (
            manifest.get_usize("num_source")?,
            manifest.get_usize("num_target")?,
            manifest.get_usize("num_test")?,
        );
        let source = (0..ns)
            .map(|i| {
                Ok((
                    dsrt::read_file(&item_path(dir, "source", "img", i))?,
                    dsrt::read_file(&item_path(dir, "source", "lbl", i))?,
                ))
            })
            .collect::<Result<_>>()?;
        let target = (0..nt)
            .map(|i| {
                Ok((
                    dsrt::read_file(&item_path(dir, "target", "day", i))?,
                    dsrt::read_file(&item_path(dir, "target", "night", i))?,
                ))
            })
            .collect::<Result<_>>()?;
        let test = (0..ne)
            .map(|i| {
                Ok((
                    dsrt::read_file(&item_path(dir, "test", "night", i))?,
                    dsrt::read_file(&item_path(dir, "test", "lbl", i))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            manifest,
            source,
            target,
            test,
        })
    }

    /// Hidden ground truth of the target night images, `[N, H, W]`.
    pub fn load_sealed_target_labels(dir: &Path) -> Result<Tensor<u8>> {
        dsrt::read_file(&dir.join(SEALED_TARGET_LABELS))
    }

    /// Builds the same content in memory without touching disk.
    pub fn generate(cfg: &DatasetConfig, taxonomy: &Taxonomy) -> Result<Self> {
        let source = (0..cfg.num_source)
            .map(|i| source_sample(cfg, taxonomy, i).map(|s| (s.image, s.label)))
            .collect::<Result<_>>()?;
        let target = (0..cfg.num_target)
            .map(|i| target_pair(cfg, taxonomy, i).map(|(d, n)| (d.image, n.image)))
            .collect::<Result<_>>()?;
        let test = (0..cfg.num_test)
            .map(|i| test_sample(cfg, taxonomy, i).map(|s| (s.image, s.label)))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            manifest: manifest_for(cfg),
            source,
            target,
            test,
        })
    }
}

/// SHA-256 over every file below `dir` (sorted relative paths and contents).
pub fn dir_digest(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(dir.join(&f)).map_err(|e| Error::io(dir.join(&f), e))?;
        h.update(f.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 3,
            num_source: 3,
            num_target: 2,
            num_test: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn round_trip_and_digest() {
        let t = Taxonomy::street();
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&cfg, &t, a.path()).unwrap();
        build_dataset(&cfg, &t, b.path()).unwrap();
        assert_eq!(dir_digest(a.path()).unwrap(), dir_digest(b.path()).unwrap());

        let loaded = Dataset::load(a.path()).unwrap();
        let mem = Dataset::generate(&cfg, &t).unwrap();
        assert_eq!(loaded.source, mem.source);
        assert_eq!(loaded.target, mem.target);
        assert_eq!(loaded.test, mem.test);
        assert_eq!(loaded.manifest, mem.manifest);
        let sealed = Dataset::load_sealed_target_labels(a.path()).unwrap();
        assert_eq!(sealed.shape(), &[2, 64, 64]);
    }

    #[test]
    fn empty_source_rejected() {
        let cfg = DatasetConfig {
            num_source: 0,
            ..small()
        };
        let d = tempfile::tempdir().unwrap();
        assert!(build_dataset(&cfg, &Taxonomy::street(), d.path()).is_err());
    }

    #[test]
    fn io_failure_names_path() {
        let d = tempfile::tempdir().unwrap();
        let blocker = d.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = build_dataset(&small(), &Taxonomy::street(), &blocker).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }

    #[test]
    fn manifest_parses_comments() {
        let m = Manifest::parse("# hi\na = 1 # trailing\n\nb=two\n").unwrap();
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(m.get("b"), Some("two"));
        assert!(Manifest::parse("novalue\n").is_err());
    }
}
