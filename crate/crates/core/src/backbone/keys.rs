//! Textual model description: the `[model]` section of a run config, also
//! echoed into checkpoints so a model can be rebuilt from its file.

use super::{MaskPolicy, NetworkConfig};
use crate::attention::{AttentionSpec, CellVariant, LstmCellConfig, OutputActivation, SamKind, Sharing};
use crate::error::{Error, Result};

/// A documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

pub const MODEL_KEYS: &[KeySpec] = &[
    KeySpec {
        key: "arch",
        default: "tiny-dia",
        doc: "named architecture: resnet83, resnet164, resnet245, resnet407, resnet56-basic, tiny-dia",
    },
    KeySpec {
        key: "attention",
        default: "dia",
        doc: "none, se, eca or dia",
    },
    KeySpec {
        key: "sharing",
        default: "shared",
        doc: "shared (one unit per stage) or per-block; dia requires shared",
    },
    KeySpec {
        key: "cell",
        default: "modified",
        doc: "LSTM cell for dia: standard, modified or light",
    },
    KeySpec {
        key: "reduction",
        default: "4",
        doc: "reduction ratio r for the dia cell and for se",
    },
    KeySpec {
        key: "activation",
        default: "sigmoid",
        doc: "dia output activation: sigmoid, tanh or relu",
    },
    KeySpec {
        key: "stack_depth",
        default: "1",
        doc: "number of stacked dia cells",
    },
    KeySpec {
        key: "eca_kernel",
        default: "3",
        doc: "odd 1-D kernel size for eca",
    },
    KeySpec {
        key: "blocks",
        default: "auto",
        doc: "blocks per stage, or auto for the architecture's own",
    },
    KeySpec {
        key: "stage_mask",
        default: "all",
        doc: "per-stage attention switches, e.g. 1,0,1",
    },
    KeySpec {
        key: "block_mask",
        default: "all",
        doc: "per-block attention switches, stages separated by ';', e.g. 1,0,1;1,1,1;0,1,1",
    },
    KeySpec {
        key: "mask_policy",
        default: "freeze",
        doc: "masked blocks under a shared dia unit: freeze (state waits) or advance (state steps)",
    },
    KeySpec {
        key: "use_skip",
        default: "true",
        doc: "residual skip connections",
    },
    KeySpec {
        key: "use_batchnorm",
        default: "true",
        doc: "batch normalization layers",
    },
    KeySpec {
        key: "num_classes",
        default: "auto",
        doc: "classifier outputs, or auto (dataset classes when training, else the architecture's)",
    },
    KeySpec {
        key: "input_shape",
        default: "auto",
        doc: "CxHxW of one image, or auto (dataset shape when training, else 3x32x32)",
    },
];

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

pub fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_mask_row(key: &str, v: &str) -> Result<Vec<bool>> {
    v.split(',').map(|t| parse_bool(key, t.trim())).collect()
}

/// Resolve a network config. `get` returns the value of a model key, with
/// defaults already applied.
pub fn network_from_keys(get: &dyn Fn(&str) -> String) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::named(&get("arch"))?;

    let reduction = parse_usize("model.reduction", &get("reduction"))?;
    let kind = match get("attention").as_str() {
        "none" => SamKind::None,
        "se" => SamKind::Se { reduction },
        "eca" => SamKind::Eca {
            kernel: parse_usize("model.eca_kernel", &get("eca_kernel"))?,
        },
        "dia" => {
            let variant = match get("cell").as_str() {
                "standard" => CellVariant::Standard,
                "modified" => CellVariant::Modified { reduction },
                "light" => CellVariant::Light { reduction },
                other => return Err(Error::config(format!("model.cell: unknown cell '{other}'"))),
            };
            SamKind::DiaLstm(LstmCellConfig {
                variant,
                output_activation: OutputActivation::parse(&get("activation"))
                    .map_err(|e| Error::config(format!("model.activation: {e}")))?,
                stack_depth: parse_usize("model.stack_depth", &get("stack_depth"))?,
            })
        }
        other => return Err(Error::config(format!("model.attention: unknown kind '{other}'"))),
    };
    let sharing = match get("sharing").as_str() {
        "shared" => Sharing::SharedPerStage,
        "per-block" => Sharing::PerBlock,
        other => return Err(Error::config(format!("model.sharing: unknown mode '{other}'"))),
    };
    cfg.attention = AttentionSpec { kind, sharing };

    let blocks = get("blocks");
    if blocks != "auto" {
        cfg = cfg.with_blocks_per_stage(parse_usize("model.blocks", &blocks)?);
    }
    let stage_mask = get("stage_mask");
    if stage_mask != "all" {
        cfg.attention_stage_mask = Some(parse_mask_row("model.stage_mask", &stage_mask)?);
    }
    let block_mask = get("block_mask");
    if block_mask != "all" {
        cfg.attention_block_mask = Some(
            block_mask
                .split(';')
                .map(|row| parse_mask_row("model.block_mask", row.trim()))
                .collect::<Result<_>>()?,
        );
    }
    cfg.mask_policy = match get("mask_policy").as_str() {
        "freeze" => MaskPolicy::Freeze,
        "advance" => MaskPolicy::Advance,
        other => return Err(Error::config(format!("model.mask_policy: unknown policy '{other}'"))),
    };
    cfg.use_skip = parse_bool("model.use_skip", &get("use_skip"))?;
    cfg.use_batchnorm = parse_bool("model.use_batchnorm", &get("use_batchnorm"))?;
    let classes = get("num_classes");
    if classes != "auto" {
        cfg.num_classes = parse_usize("model.num_classes", &classes)?;
    }
    let shape = get("input_shape");
    if shape != "auto" {
        cfg.input_shape = parse_shape(&shape)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_shape(v: &str) -> Result<[usize; 3]> {
    let dims: Vec<&str> = v.split('x').collect();
    if dims.len() != 3 {
        return Err(Error::config(format!("model.input_shape: expected CxHxW, got '{v}'")));
    }
    let mut out = [0; 3];
    for (o, d) in out.iter_mut().zip(dims) {
        *o = parse_usize("model.input_shape", d)?;
    }
    Ok(out)
}

pub fn format_shape(s: [usize; 3]) -> String {
    format!("{}x{}x{}", s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn resolve(overrides: &[(&str, &str)]) -> Result<NetworkConfig> {
        let mut map: HashMap<&str, &str> = MODEL_KEYS.iter().map(|k| (k.key, k.default)).collect();
        map.extend(overrides.iter().copied());
        network_from_keys(&|k| map[k].to_string())
    }

    #[test]
    fn defaults_give_tiny_dia_with_modified_cell() {
        let cfg = resolve(&[]).unwrap();
        assert_eq!(cfg.stages.len(), 3);
        assert_eq!(cfg.attention.kind, SamKind::DiaLstm(LstmCellConfig::modified(4)));
    }

    #[test]
    fn masks_and_shape() {
        let cfg = resolve(&[
            ("stage_mask", "1,0,1"),
            ("block_mask", "1,1,0;1,1,1;0,0,1"),
            ("input_shape", "3x16x16"),
        ])
        .unwrap();
        assert_eq!(cfg.attention_stage_mask, Some(vec![true, false, true]));
        assert_eq!(cfg.attention_block_mask.unwrap()[2], vec![false, false, true]);
        assert_eq!(cfg.input_shape, [3, 16, 16]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in [
            ("attention", "cbam"),
            ("cell", "gru"),
            ("use_skip", "maybe"),
            ("stage_mask", "1,1"),
            ("input_shape", "3x16"),
            ("sharing", "per-block"),
        ] {
            assert!(matches!(resolve(&[bad]), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
