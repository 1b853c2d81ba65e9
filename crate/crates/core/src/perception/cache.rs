//! Content-addressed cache for pretrained backbone weights.
//!
//! Files live at `<cache_dir>/<backbone>/<sha256>.weights`. The digest in the
//! file name is recomputed on every load, so a truncated or edited file is
//! reported instead of silently used.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{FeatureBackbone, ResNetBackbone, ResNetSpec, ToyBackbone};
use crate::{Error, Result};

/// Overrides the default cache directory.
pub const CACHE_ENV: &str = "MDPS_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Toy,
    ResNet101,
    WideResNet101,
}

impl BackboneKind {
    pub const NAMES: [&'static str; 3] = ["wide-resnet-101", "resnet-101", "toy"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::Toy),
            "resnet-101" => Ok(Self::ResNet101),
            "wide-resnet-101" => Ok(Self::WideResNet101),
            _ => Err(Error::UnknownBackbone {
                name: name.to_string(),
                options: Self::NAMES.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Toy => "toy",
            Self::ResNet101 => "resnet-101",
            Self::WideResNet101 => "wide-resnet-101",
        }
    }

    /// ImageNet weights in torchvision layout, published as safetensors.
    pub fn url(self) -> Option<&'static str> {
        match self {
            Self::Toy => None,
            Self::ResNet101 => Some("https://huggingface.co/timm/resnet101.tv_in1k/resolve/main/model.safetensors"),
            Self::WideResNet101 => {
                Some("https://huggingface.co/timm/wide_resnet101_2.tv_in1k/resolve/main/model.safetensors")
            }
        }
    }

    fn spec(self) -> Option<ResNetSpec> {
        match self {
            Self::Toy => None,
            Self::ResNet101 => Some(ResNetSpec::RESNET101),
            Self::WideResNet101 => Some(ResNetSpec::WIDE_RESNET101),
        }
    }
}

/// `$MDPS_CACHE_DIR`, else `$HOME/.cache/mdps`, else `./.mdps-cache`.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("mdps"),
        None => PathBuf::from(".mdps-cache"),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn verify(path: &Path, expected: &str) -> Result<()> {
    let actual = sha256_file(path)?;
    if actual != expected {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

fn cached_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "weights"))
        .collect();
    files.sort();
    Ok(files)
}

fn download(url: &str, dest: &Path) -> Result<()> {
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Error::Download(format!("{url}: {e}")))?;
    let mut reader = response
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .reader();
    let mut file = fs::File::create(dest).map_err(|e| Error::io(dest, e))?;
    std::io::copy(&mut reader, &mut file).map_err(|e| Error::Download(format!("{url}: {e}")))?;
    file.flush().map_err(|e| Error::io(dest, e))
}

/// Path of verified weights for `name`, downloading from `url` on a miss.
///
/// With `expected_digest` only that exact file is accepted; otherwise any
/// cached file whose content matches its name is used.
pub fn fetch_weights(
    name: &str,
    url: &str,
    cache_dir: &Path,
    offline: bool,
    expected_digest: Option<&str>,
) -> Result<PathBuf> {
    let dir = cache_dir.join(name);
    if let Some(digest) = expected_digest {
        let path = dir.join(format!("{digest}.weights"));
        if path.exists() {
            verify(&path, digest)?;
            return Ok(path);
        }
    } else if let Some(path) = cached_files(&dir)?.into_iter().next() {
        let digest = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        verify(&path, &digest)?;
        return Ok(path);
    }
    if offline {
        return Err(Error::CacheMiss {
            backbone: name.to_string(),
            dir,
        });
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let partial = dir.join(format!(".download-{}", std::process::id()));
    let result = download(url, &partial).and_then(|_| {
        let actual = sha256_file(&partial)?;
        if let Some(expected) = expected_digest {
            if actual != expected {
                return Err(Error::DigestMismatch {
                    path: PathBuf::from(url),
                    expected: expected.to_string(),
                    actual,
                });
            }
        }
        let path = dir.join(format!("{actual}.weights"));
        fs::rename(&partial, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    });
    if result.is_err() {
        let _ = fs::remove_file(&partial);
    }
    result
}

/// Constructs the named backbone, fetching pretrained weights when needed.
pub fn fetch_pretrained(name: &str, cache_dir: &Path, offline: bool) -> Result<Box<dyn FeatureBackbone>> {
    let kind = BackboneKind::parse(name)?;
    match (kind.url(), kind.spec()) {
        (Some(url), Some(spec)) => {
            let path = fetch_weights(kind.name(), url, cache_dir, offline, None)?;
            Ok(Box::new(ResNetBackbone::from_safetensors(kind.name(), spec, &path)?))
        }
        _ => Ok(Box::new(ToyBackbone::new())),
    }
}
