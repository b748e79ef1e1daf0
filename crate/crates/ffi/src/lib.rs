//! C ABI over `bagcams`: load a checkpoint, run the classifier and compute
//! normalized localization maps, plus pooled pixel metrics.
//!
//! Every fallible call returns a [`BagcamsStatus`]; on failure a one-line
//! description is available from [`bagcams_last_error_message`] on the same
//! thread until the next call. Handles are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bagcams::localize::{localize, LocalizeOptions, Method, Scheme};
use bagcams::metrics::{self, BBox, GroundTruth};
use bagcams::model::Network;
use bagcams::tensor::Tensor;
use thiserror::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagcamsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Shape = 5,
    /// The method cannot run here (CAM off the final layer, localizer budget, domain).
    Unsupported = 6,
    Internal = 7,
}

#[derive(Debug, Error)]
enum FfiError {
    #[error("null pointer passed as `{0}`")]
    Null(&'static str),
    #[error("`{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Core(#[from] bagcams::Error),
    #[error("internal panic: {0}")]
    Panic(String),
}

impl FfiError {
    fn status(&self) -> BagcamsStatus {
        use bagcams::Error as E;
        match self {
            FfiError::Null(_) => BagcamsStatus::NullPointer,
            FfiError::Utf8(_) | FfiError::Argument(_) => BagcamsStatus::InvalidArgument,
            FfiError::Panic(_) => BagcamsStatus::Internal,
            FfiError::Core(e) => match e {
                E::Io { .. } => BagcamsStatus::Io,
                E::Corrupt { .. } | E::Checksum { .. } | E::Version { .. } => BagcamsStatus::Corrupt,
                E::InputShape { .. } | E::Shape(_) | E::Tensor(_) => BagcamsStatus::Shape,
                E::CamChannels { .. } | E::Budget { .. } | E::Domain(_) => BagcamsStatus::Unsupported,
                E::Usage(_) | E::UnknownCapture { .. } | E::InvalidData(_) | E::InvalidNetwork(_) => {
                    BagcamsStatus::InvalidArgument
                }
                _ => BagcamsStatus::Internal,
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("interior NULs removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> BagcamsStatus {
    set_last_error(None);
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let what = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown".into());
        Err(FfiError::Panic(what))
    });
    match result {
        Ok(()) => BagcamsStatus::Ok,
        Err(e) => {
            let status = e.status();
            set_last_error(Some(e.to_string().replace('\n', " ")));
            status
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, FfiError> {
    p.as_mut().ok_or(FfiError::Null(name))
}

/// A trained classifier loaded from a checkpoint.
pub struct BagcamsNetwork {
    net: Network,
}

/// A localization map at input resolution, values in `[0, 1]`, row-major.
pub struct BagcamsMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
    class: usize,
    predicted: usize,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bagcams_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next `bagcams_*` call on this thread.
#[no_mangle]
pub extern "C" fn bagcams_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by `bagcams train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bagcams_network_load(path: *const c_char, out: *mut *mut BagcamsNetwork) -> BagcamsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (net, _) = Network::load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(BagcamsNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `network` must come from [`bagcams_network_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn bagcams_network_free(network: *mut BagcamsNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Expected image layout `[channels, height, width]` and the class count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bagcams_network_shape(
    network: *const BagcamsNetwork,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> BagcamsStatus {
    guard(|| {
        let net = &network.as_ref().ok_or(FfiError::Null("network"))?.net;
        let input = net.spec().input;
        *out_arg(channels, "channels")? = input.channels;
        *out_arg(height, "height")? = input.height;
        *out_arg(width, "width")? = input.width;
        *out_arg(classes, "classes")? = net.classes();
        Ok(())
    })
}

fn image_tensor(net: &Network, image: &[f64]) -> Result<Tensor, FfiError> {
    let i = net.spec().input;
    if let Some(p) = image.iter().position(|v| !v.is_finite()) {
        return Err(FfiError::Argument(format!("image value {} is not finite", p)));
    }
    Tensor::new(vec![i.channels, i.height, i.width], image.to_vec()).map_err(|_| {
        FfiError::Argument(format!(
            "image has {} values, network expects {}x{}x{} = {}",
            image.len(),
            i.channels,
            i.height,
            i.width,
            i.channels * i.height * i.width
        ))
    })
}

/// Class logits for one channel-major image; `scores_len` must equal the class count.
///
/// # Safety
/// `image` must hold `image_len` values and `scores` room for `scores_len`.
#[no_mangle]
pub unsafe extern "C" fn bagcams_network_forward(
    network: *const BagcamsNetwork,
    image: *const f64,
    image_len: usize,
    scores: *mut f64,
    scores_len: usize,
) -> BagcamsStatus {
    guard(|| {
        let net = &network.as_ref().ok_or(FfiError::Null("network"))?.net;
        let image = image_tensor(net, slice_arg(image, image_len, "image")?)?;
        if scores.is_null() {
            return Err(FfiError::Null("scores"));
        }
        if scores_len != net.classes() {
            return Err(FfiError::Argument(format!(
                "scores_len is {}, network has {} classes",
                scores_len,
                net.classes()
            )));
        }
        let logits = net.forward(&image)?;
        std::slice::from_raw_parts_mut(scores, scores_len).copy_from_slice(&logits);
        Ok(())
    })
}

/// Normalized, upsampled map for one image.
///
/// `method` is one of `cam`, `gradcam`, `gradcampp`, `pcs`, `bagcams-closed`,
/// `bagcams-exact`; `layer` a capture name such as `final` or `block1`;
/// `scheme` (`avg`, `alpha`, `group`) applies to `bagcams-exact` and may be
/// NULL for `group`. A negative `class_index` selects the predicted class.
///
/// # Safety
/// Strings must be NUL-terminated, `image` must hold `image_len` values and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bagcams_localize(
    network: *const BagcamsNetwork,
    image: *const f64,
    image_len: usize,
    method: *const c_char,
    layer: *const c_char,
    scheme: *const c_char,
    class_index: i64,
    out: *mut *mut BagcamsMap,
) -> BagcamsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let net = &network.as_ref().ok_or(FfiError::Null("network"))?.net;
        let image = image_tensor(net, slice_arg(image, image_len, "image")?)?;
        let method: Method = str_arg(method, "method")?.parse()?;
        let layer = str_arg(layer, "layer")?;
        let scheme: Scheme = if scheme.is_null() { Scheme::Group } else { str_arg(scheme, "scheme")?.parse()? };
        let class = usize::try_from(class_index).ok();
        let opts = LocalizeOptions { scheme, ..LocalizeOptions::default() };
        let result = localize(net, &image, layer, method, class, opts)?;
        *out = Box::into_raw(Box::new(BagcamsMap {
            height: result.map.height,
            width: result.map.width,
            values: result.map.values,
            class: result.class,
            predicted: result.predicted,
        }));
        Ok(())
    })
}

/// # Safety
/// `map` must come from [`bagcams_localize`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn bagcams_map_free(map: *mut BagcamsMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Map dimensions and the localized and predicted classes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bagcams_map_info(
    map: *const BagcamsMap,
    height: *mut usize,
    width: *mut usize,
    class_index: *mut usize,
    predicted: *mut usize,
) -> BagcamsStatus {
    guard(|| {
        let m = map.as_ref().ok_or(FfiError::Null("map"))?;
        *out_arg(height, "height")? = m.height;
        *out_arg(width, "width")? = m.width;
        *out_arg(class_index, "class_index")? = m.class;
        *out_arg(predicted, "predicted")? = m.predicted;
        Ok(())
    })
}

/// Borrowed pointer to the `height * width` map values, valid until the map is freed.
/// Returns NULL for a NULL map.
///
/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn bagcams_map_values(map: *const BagcamsMap) -> *const f64 {
    map.as_ref().map_or(ptr::null(), |m| m.values.as_ptr())
}

/// Dataset-pooled PxAP and peak IoU of `images` maps against binary masks,
/// both stored image after image, row-major, `height * width` per image.
/// Masks are nonzero for object pixels.
///
/// # Safety
/// `maps` and `masks` must hold `images * height * width` values each.
#[no_mangle]
pub unsafe extern "C" fn bagcams_pixel_scores(
    maps: *const f64,
    masks: *const u8,
    images: usize,
    height: usize,
    width: usize,
    pxap: *mut f64,
    piou: *mut f64,
) -> BagcamsStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .filter(|n| *n > 0)
            .ok_or_else(|| FfiError::Argument("empty image size".into()))?;
        let total = n.checked_mul(images).ok_or_else(|| FfiError::Argument("size overflow".into()))?;
        let maps = slice_arg(maps, total, "maps")?;
        let masks = slice_arg(masks, total, "masks")?;
        let pxap = out_arg(pxap, "pxap")?;
        let piou = out_arg(piou, "piou")?;
        let heatmaps: Vec<Vec<f64>> = maps.chunks(n).map(<[f64]>::to_vec).collect();
        let gts: Vec<GroundTruth> = masks
            .chunks(n)
            .map(|m| {
                let mask: Vec<bool> = m.iter().map(|&v| v != 0).collect();
                let boxes = BBox::of_mask(&mask, width).into_iter().collect();
                GroundTruth { width, height, mask: Some(mask), boxes, class: 0 }
            })
            .collect();
        *pxap = metrics::pxap(&heatmaps, &gts)?;
        *piou = metrics::piou(&heatmaps, &gts)?;
        Ok(())
    })
}
