//! Line-oriented architecture descriptions.
//!
//! ```text
//! # comments and blank lines are ignored
//! latent_dim=100                  # flat network input
//! image=1x28x28                   # image input, or expected image output
//! fc out=1024 bn=true act=relu
//! reshape 128 7 7
//! conv out=64 k=5 pad=2 up=2 bn=true act=relu
//! conv out=128 k=5 stride=2 pad=2 act=leaky_relu(0.2)
//! act sigmoid
//! ```
//!
//! `up=2` inserts a 2× nearest-neighbor upsample before the convolution;
//! `bn=true` appends batch norm after it; `act=` appends an activation.

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, Network};

pub const MNIST_GENERATOR_CFG: &str = include_str!("../../configs/mnist_g.cfg");
pub const MNIST_DISCRIMINATOR_CFG: &str = include_str!("../../configs/mnist_d.cfg");

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub latent_dim: Option<usize>,
    pub image: Option<Vec<usize>>,
    pub layers: Vec<LayerSpec>,
}

impl ArchConfig {
    pub fn input_dims(&self) -> Vec<usize> {
        match (self.latent_dim, &self.image) {
            (Some(d), _) => vec![d],
            (None, Some(img)) => img.clone(),
            (None, None) => unreachable!("parser requires an input header"),
        }
    }

    /// A network with zero weights, unit batch-norm gains and (0, 1) running
    /// statistics.
    pub fn build(&self) -> Result<Network> {
        Network::new(&self.input_dims(), self.layers.clone())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_activation(s: &str) -> Option<Activation> {
    match s {
        "relu" => Some(Activation::Relu),
        "sigmoid" => Some(Activation::Sigmoid),
        "tanh" => Some(Activation::Tanh),
        _ => {
            let slope = s.strip_prefix("leaky_relu(")?.strip_suffix(')')?;
            Some(Activation::LeakyRelu(slope.trim().parse().ok()?))
        }
    }
}

fn parse_extents(s: &str) -> Option<Vec<usize>> {
    let v: Option<Vec<usize>> = s.split('x').map(|p| p.trim().parse().ok()).collect();
    v.filter(|v| !v.is_empty() && !v.contains(&0))
}

/// `key=value` options of a layer line, each usable once.
struct Options<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str, bool)>,
}

impl<'a> Options<'a> {
    fn new(line: usize, words: &[&'a str]) -> Result<Self> {
        let mut pairs: Vec<(&str, &str, bool)> = Vec::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected key=value, got {w:?}")))?;
            if pairs.iter().any(|(pk, _, _)| *pk == k) {
                return Err(parse_err(line, format!("option {k:?} given twice")));
            }
            pairs.push((k, v, false));
        }
        Ok(Options { line, pairs })
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.pairs.iter_mut().find(|(k, _, _)| *k == key).map(|p| {
            p.2 = true;
            p.1
        })
    }

    fn count(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.raw(key) {
            Some(v) => v
                .parse()
                .map_err(|_| parse_err(self.line, format!("{key} must be a non-negative integer, got {v:?}"))),
            None => default.ok_or_else(|| parse_err(self.line, format!("missing {key}="))),
        }
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        match self.raw(key) {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(v) => Err(parse_err(self.line, format!("{key} must be true or false, got {v:?}"))),
        }
    }

    fn activation(&mut self) -> Result<Option<Activation>> {
        match self.raw("act") {
            None => Ok(None),
            Some(v) => parse_activation(v)
                .map(Some)
                .ok_or_else(|| parse_err(self.line, format!("unknown activation {v:?}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.pairs.iter().find(|p| !p.2) {
            Some((k, _, _)) => Err(parse_err(self.line, format!("unknown option {k:?}"))),
            None => Ok(()),
        }
    }
}

pub fn parse_arch_config(text: &str) -> Result<ArchConfig> {
    let mut latent_dim = None;
    let mut image = None;
    let mut layers = Vec::new();
    let mut dims: Option<Vec<usize>> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        if let Some((key, value)) = content.split_once('=').filter(|(k, _)| !k.contains(' ')) {
            if !layers.is_empty() {
                return Err(parse_err(line, format!("header {key:?} after the first layer")));
            }
            match key.trim() {
                "latent_dim" => {
                    let d: usize = value
                        .trim()
                        .parse()
                        .ok()
                        .filter(|&d| d > 0)
                        .ok_or_else(|| parse_err(line, format!("bad latent_dim {value:?}")))?;
                    latent_dim = Some(d);
                }
                "image" => {
                    let ext = parse_extents(value.trim())
                        .filter(|e| e.len() == 3)
                        .ok_or_else(|| parse_err(line, format!("image must be CxHxW, got {value:?}")))?;
                    image = Some(ext);
                }
                other => return Err(parse_err(line, format!("unknown header {other:?}"))),
            }
            continue;
        }

        let words: Vec<&str> = content.split_whitespace().collect();
        let current = match (&dims, latent_dim, &image) {
            (Some(d), _, _) => d.clone(),
            (None, Some(d), _) => vec![d],
            (None, None, Some(img)) => img.clone(),
            (None, None, None) => return Err(parse_err(line, "layers need a latent_dim= or image= header first")),
        };
        let mut new_layers = Vec::new();
        match words[0] {
            "fc" => {
                let mut o = Options::new(line, &words[1..])?;
                let out = o.count("out", None)?;
                let bn = o.flag("bn")?;
                let act = o.activation()?;
                o.finish()?;
                if current.len() != 1 {
                    return Err(parse_err(line, format!("fc needs a flat input, got {current:?}")));
                }
                new_layers.push(LayerSpec::FullyConnected {
                    inputs: current[0],
                    outputs: out,
                });
                if bn {
                    new_layers.push(LayerSpec::BatchNorm { features: out });
                }
                new_layers.extend(act.map(LayerSpec::Activation));
            }
            "conv" => {
                let mut o = Options::new(line, &words[1..])?;
                let out = o.count("out", None)?;
                let k = o.count("k", None)?;
                let stride = o.count("stride", Some(1))?;
                let pad = o.count("pad", Some(0))?;
                let up = o.count("up", Some(1))?;
                let bn = o.flag("bn")?;
                let act = o.activation()?;
                o.finish()?;
                if current.len() != 3 {
                    return Err(parse_err(line, format!("conv needs a CxHxW input, got {current:?}")));
                }
                match up {
                    1 => {}
                    2 => new_layers.push(LayerSpec::Upsample2x),
                    _ => return Err(parse_err(line, format!("only up=2 is supported, got {up}"))),
                }
                new_layers.push(LayerSpec::Conv {
                    in_ch: current[0],
                    out_ch: out,
                    k,
                    stride,
                    pad,
                });
                if bn {
                    new_layers.push(LayerSpec::BatchNorm { features: out });
                }
                new_layers.extend(act.map(LayerSpec::Activation));
            }
            "reshape" => {
                let target: Option<Vec<usize>> = words[1..].iter().map(|w| w.parse().ok()).collect();
                let target = target
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| parse_err(line, "reshape needs positive integer extents"))?;
                new_layers.push(LayerSpec::Reshape { target });
            }
            "act" => {
                if words.len() != 2 {
                    return Err(parse_err(line, "act takes exactly one activation name"));
                }
                let a = parse_activation(words[1])
                    .ok_or_else(|| parse_err(line, format!("unknown activation {:?}", words[1])))?;
                new_layers.push(LayerSpec::Activation(a));
            }
            other => return Err(parse_err(line, format!("unknown layer keyword {other:?}"))),
        }
        let mut d = current;
        for l in &new_layers {
            d = l.output_dims(&d).map_err(|e| parse_err(line, e.to_string()))?;
        }
        dims = Some(d);
        layers.extend(new_layers);
    }

    if layers.is_empty() {
        return Err(parse_err(text.lines().count(), "no layers"));
    }
    let out = dims.expect("layers imply dims");
    if let (Some(_), Some(img)) = (latent_dim, &image) {
        if &out != img {
            return Err(parse_err(
                text.lines().count(),
                format!("network produces {out:?} but image= declares {img:?}"),
            ));
        }
    }
    Ok(ArchConfig {
        latent_dim,
        image,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, BnMode};
    use crate::tensor::Tensor;

    #[test]
    fn shipped_generator_matches_the_table() {
        let cfg = parse_arch_config(MNIST_GENERATOR_CFG).unwrap();
        assert_eq!(cfg.latent_dim, Some(100));
        let net = cfg.build().unwrap();
        assert_eq!(net.output_dims(), &[1, 28, 28]);
        let expected = vec![
            LayerSpec::FullyConnected {
                inputs: 100,
                outputs: 1024,
            },
            LayerSpec::BatchNorm { features: 1024 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::FullyConnected {
                inputs: 1024,
                outputs: 6272,
            },
            LayerSpec::BatchNorm { features: 6272 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Reshape {
                target: vec![128, 7, 7],
            },
            LayerSpec::Upsample2x,
            LayerSpec::Conv {
                in_ch: 128,
                out_ch: 64,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::BatchNorm { features: 64 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Upsample2x,
            LayerSpec::Conv {
                in_ch: 64,
                out_ch: 1,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Activation(Activation::Sigmoid),
        ];
        assert_eq!(cfg.layers, expected);
        // Hand tally: weights + biases of each fc/conv, gain + shift of each bn.
        let fc1 = 100 * 1024 + 1024;
        let bn1 = 2 * 1024;
        let fc2 = 1024 * 6272 + 6272;
        let bn2 = 2 * 6272;
        let conv1 = 64 * 128 * 25 + 64;
        let bn3 = 2 * 64;
        let conv2 = 64 * 25 + 1;
        assert_eq!(net.parameter_count(), fc1 + bn1 + fc2 + bn2 + conv1 + bn3 + conv2);
        assert_eq!(net.parameter_count(), 6_753_409);
    }

    #[test]
    fn shipped_discriminator_maps_images_to_one_score() {
        let cfg = parse_arch_config(MNIST_DISCRIMINATOR_CFG).unwrap();
        let mut net = cfg.build().unwrap();
        net.init_weights(0);
        assert_eq!(net.input_dims(), &[1, 28, 28]);
        assert_eq!(net.output_dims(), &[1]);
        assert!(cfg.layers.contains(&LayerSpec::Reshape { target: vec![6272] }));
        let (y, _) = forward(&net, &Tensor::full(&[2, 1, 28, 28], 0.5).unwrap(), BnMode::BatchStats).unwrap();
        assert!(y.data().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_arch_config("latent_dim=3\n\nfrob out=3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("line 3"));
        let e = parse_arch_config("latent_dim=3\nfc out=4\nreshape 5\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_arch_config("latent_dim=3\nfc out=4 colour=blue\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_arch_config("fc out=4\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = parse_arch_config("latent_dim=3\nfc out=4 act=swish\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_arch_config("latent_dim=3\nimage=1x2x2\nfc out=5\n").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
    }

    #[test]
    fn empty_input_has_no_layers() {
        for text in ["", "# only a comment\n", "latent_dim=4\n"] {
            let e = parse_arch_config(text).unwrap_err();
            assert!(e.to_string().contains("no layers"), "{e}");
        }
    }

    #[test]
    fn leaky_slope_is_parsed() {
        let cfg = parse_arch_config("latent_dim=2\nfc out=2 act=leaky_relu(0.3)\n").unwrap();
        assert_eq!(cfg.layers[1], LayerSpec::Activation(Activation::LeakyRelu(0.3)));
        assert!(parse_arch_config("latent_dim=2\nfc out=2 act=leaky_relu(1.5)\n").is_err());
    }
}
