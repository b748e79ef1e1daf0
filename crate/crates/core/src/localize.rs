//! Method dispatch: one call from an image to a normalized, upsampled map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::{
    self, bag_combine, bagcams_closed, bagcams_exact_at, cam_project, gradcam, gradcam_pp, normalize_map, pcs,
    rlg_localizers_at, CoefficientScheme, LocalizationMap, NormalizeMode, RlgOptions, ScoreTransform,
};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcampp")]
    GradCamPlusPlus,
    #[serde(rename = "pcs")]
    Pcs,
    #[serde(rename = "bagcams-closed")]
    BagCamsClosed,
    #[serde(rename = "bagcams-exact")]
    BagCamsExact,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Cam,
        Method::GradCam,
        Method::GradCamPlusPlus,
        Method::Pcs,
        Method::BagCamsClosed,
        Method::BagCamsExact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::GradCam => "gradcam",
            Method::GradCamPlusPlus => "gradcampp",
            Method::Pcs => "pcs",
            Method::BagCamsClosed => "bagcams-closed",
            Method::BagCamsExact => "bagcams-exact",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Usage(format!("unknown method `{}` (valid: {})", s, names.join(", ")))
        })
    }
}

/// Bagging coefficients exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Avg,
    Alpha,
    Group,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Avg, Scheme::Alpha, Scheme::Group];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Avg => "avg",
            Scheme::Alpha => "alpha",
            Scheme::Group => "group",
        }
    }

    pub fn coefficients(self) -> CoefficientScheme {
        match self {
            Scheme::Avg => CoefficientScheme::UniformAverage,
            Scheme::Alpha => CoefficientScheme::SpatialAlpha,
            Scheme::Group => CoefficientScheme::Grouping,
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown scheme `{}` (valid: avg, alpha, group)", s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizeOptions {
    pub scheme: Scheme,
    /// Allow full regional localizers beyond the budget.
    pub force: bool,
    /// Score whose gradient drives gradcam, gradcampp and pcs.
    pub baseline_transform: ScoreTransform,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions { scheme: Scheme::Group, force: false, baseline_transform: ScoreTransform::Identity }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localized {
    /// Normalized map at input resolution, row-major.
    pub map: LocalizationMap,
    pub class: usize,
    pub predicted: usize,
}

/// Raw (unnormalized) map at capture resolution for `class`.
pub fn raw_map(
    net: &Network,
    image: &Tensor,
    layer: &str,
    method: Method,
    class: usize,
    opts: LocalizeOptions,
) -> Result<(LocalizationMap, usize)> {
    let mut pass = net.forward_capture(image, layer)?;
    let predicted = pass.predicted();
    let map = match method {
        Method::Cam => {
            let final_depth = net.spec().capture("final")?.depth;
            if pass.point().depth != final_depth {
                return Err(Error::CamChannels { head: net.head_weight().shape()[1], capture: pass.point().channels });
            }
            cam_project(net.head_weight(), pass.features())?.select_row(class)
        }
        Method::GradCam => gradcam(&pass.capture(class, opts.baseline_transform)?),
        Method::GradCamPlusPlus => gradcam_pp(&pass.capture(class, opts.baseline_transform)?),
        Method::Pcs => pcs(&pass.capture(class, opts.baseline_transform)?),
        Method::BagCamsClosed => bagcams_closed(&pass.capture(class, ScoreTransform::LogSoftmax)?)?,
        Method::BagCamsExact => {
            let z = pass.features().clone();
            let point = pass.point().clone();
            match opts.scheme {
                Scheme::Group => bagcams_exact_at(net, layer, &z, class, ScoreTransform::LogSoftmax, cam::EXACT_STEP)?,
                scheme => {
                    let rlg = RlgOptions { force: opts.force, ..RlgOptions::default() };
                    let set = rlg_localizers_at(net, layer, &z, class, ScoreTransform::LogSoftmax, rlg)?;
                    bag_combine(&set, z.data(), point.height, point.width, &scheme.coefficients())?
                }
            }
        }
    };
    Ok((map, predicted))
}

/// Map for `class` (the predicted class when `None`), upsampled to the input
/// resolution and min-max normalized.
pub fn localize(
    net: &Network,
    image: &Tensor,
    layer: &str,
    method: Method,
    class: Option<usize>,
    opts: LocalizeOptions,
) -> Result<Localized> {
    let class = match class {
        Some(k) => k,
        None => crate::model::argmax(&net.forward(image)?),
    };
    if class >= net.classes() {
        return Err(Error::Shape(format!("class {} out of range for {} classes", class, net.classes())));
    }
    let (raw, predicted) = raw_map(net, image, layer, method, class, opts)?;
    let input = net.spec().input;
    let up = cam::upsample(&raw, input.height, input.width)?;
    Ok(Localized { map: normalize_map(&up, NormalizeMode::MinMax), class, predicted })
}
