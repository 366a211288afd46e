//! Model descriptions shipped with the crate.

use super::{parse_model_description, ModelGraph};
use crate::error::{Error, Result};

pub const MOBILENET_V1_LIKE: &str = include_str!("../../models/mobilenet_v1_like.mg");
pub const MOBILENET_V2_LIKE: &str = include_str!("../../models/mobilenet_v2_like.mg");
pub const RESNET50_LIKE: &str = include_str!("../../models/resnet50_like.mg");
pub const MOBILENET_V1_REDUCED: &str = include_str!("../../models/mobilenet_v1_reduced.mg");
pub const MOBILENET_V2_REDUCED: &str = include_str!("../../models/mobilenet_v2_reduced.mg");
pub const RESNET_REDUCED: &str = include_str!("../../models/resnet_reduced.mg");

pub const NAMES: [&str; 6] = [
    "mobilenet_v1_like",
    "mobilenet_v2_like",
    "resnet50_like",
    "mobilenet_v1_reduced",
    "mobilenet_v2_reduced",
    "resnet_reduced",
];

/// Text of a bundled description, by file stem (`.mg` suffix optional).
pub fn text(name: &str) -> Option<&'static str> {
    Some(match name.trim_end_matches(".mg") {
        "mobilenet_v1_like" => MOBILENET_V1_LIKE,
        "mobilenet_v2_like" => MOBILENET_V2_LIKE,
        "resnet50_like" => RESNET50_LIKE,
        "mobilenet_v1_reduced" => MOBILENET_V1_REDUCED,
        "mobilenet_v2_reduced" => MOBILENET_V2_REDUCED,
        "resnet_reduced" => RESNET_REDUCED,
        _ => return None,
    })
}

pub fn load(name: &str) -> Result<ModelGraph> {
    let text = text(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown bundled model `{name}`; available: {}",
            NAMES.join(", ")
        ))
    })?;
    parse_model_description(text)
}
