//! Pixel labels and their lossless RGB ground-truth encoding.
//!
//! Channel order everywhere is (PT, HT, BG, OV). Three-class maps use the
//! first three.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Pt = 0,
    Ht = 1,
    Bg = 2,
    Ov = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Pt, Class::Ht, Class::Bg, Class::Ov];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Pt => "PT",
            Class::Ht => "HT",
            Class::Bg => "BG",
            Class::Ov => "OV",
        }
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Pt => [255, 0, 0],
            Class::Ht => [0, 255, 0],
            Class::Bg => [0, 0, 255],
            Class::Ov => [255, 255, 0],
        }
    }

    pub fn from_color(rgb: [u8; 3]) -> Option<Class> {
        Class::ALL.into_iter().find(|c| c.color() == rgb)
    }
}

/// Three- or four-class formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelMode {
    Three,
    Four,
}

impl LabelMode {
    pub fn classes(self) -> usize {
        match self {
            LabelMode::Three => 3,
            LabelMode::Four => 4,
        }
    }

    pub fn from_classes(n: usize) -> Result<Self> {
        match n {
            3 => Ok(LabelMode::Three),
            4 => Ok(LabelMode::Four),
            _ => Err(Error::Config(format!("class count must be 3 or 4, got {n}"))),
        }
    }

    pub fn allows(self, c: Class) -> bool {
        c.index() < self.classes()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    mode: LabelMode,
    classes: Vec<Class>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, mode: LabelMode, classes: Vec<Class>) -> Result<Self> {
        if classes.len() != (width * height) as usize {
            return shape_err(format!(
                "label map {width}x{height} needs {} labels, got {}",
                width * height,
                classes.len()
            ));
        }
        if let Some(i) = classes.iter().position(|&c| !mode.allows(c)) {
            return Err(Error::IllegalOverlap { x: i as u32 % width, y: i as u32 / width });
        }
        Ok(Self { width, height, mode, classes })
    }

    pub fn filled(width: u32, height: u32, mode: LabelMode, class: Class) -> Result<Self> {
        Self::new(width, height, mode, vec![class; (width * height) as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn classes(&self) -> &[Class] {
        &self.classes
    }

    pub fn get(&self, x: u32, y: u32) -> Class {
        self.classes[(y * self.width + x) as usize]
    }

    pub fn count(&self, c: Class) -> usize {
        self.classes.iter().filter(|&&k| k == c).count()
    }

    /// Reinterpret a three-class map as four-class (no OV pixels).
    pub fn as_four(&self) -> LabelMap {
        LabelMap { mode: LabelMode::Four, ..self.clone() }
    }

    /// One-hot C×H×W tensor in (PT, HT, BG[, OV]) channel order.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let c = self.mode.classes();
        let hw = self.classes.len();
        let mut t = Tensor::zeros(&[1, c, self.height as usize, self.width as usize]);
        for (i, k) in self.classes.iter().enumerate() {
            t.data_mut()[k.index() * hw + i] = T::one();
        }
        t
    }

    /// Per-pixel argmax of a 1×C×H×W probability tensor (ties → lowest index).
    pub fn from_probs<T: Real>(probs: &Tensor<T>) -> Result<LabelMap> {
        let (n, c, h, w) = probs.nchw()?;
        if n != 1 {
            return shape_err("from_probs expects a single sample");
        }
        let mode = LabelMode::from_classes(c)?;
        let hw = h * w;
        let classes = (0..hw)
            .map(|i| {
                let mut best = 0;
                for ch in 1..c {
                    if probs.data()[ch * hw + i] > probs.data()[best * hw + i] {
                        best = ch;
                    }
                }
                Class::from_index(best).expect("channel < 4")
            })
            .collect();
        LabelMap::new(w as u32, h as u32, mode, classes)
    }
}

/// Bit-exact color encoding: PT red, HT green, BG blue, OV yellow.
pub fn encode_gt(labels: &LabelMap) -> RgbImage {
    RgbImage::from_fn(labels.width, labels.height, |x, y| Rgb(labels.get(x, y).color()))
}

pub fn decode_gt(image: &RgbImage, mode: LabelMode) -> Result<LabelMap> {
    let mut classes = Vec::with_capacity((image.width() * image.height()) as usize);
    for (x, y, px) in image.enumerate_pixels() {
        let [r, g, b] = px.0;
        let c = Class::from_color(px.0).ok_or(Error::UnknownColor { x, y, r, g, b })?;
        if !mode.allows(c) {
            return Err(Error::IllegalOverlap { x, y });
        }
        classes.push(c);
    }
    LabelMap::new(image.width(), image.height(), mode, classes)
}

/// Per-pixel HT / PT membership after counting OV in both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMasks {
    pub width: u32,
    pub height: u32,
    pub ht: Vec<bool>,
    pub pt: Vec<bool>,
}

impl ChannelMasks {
    pub fn ht_count(&self) -> usize {
        self.ht.iter().filter(|&&b| b).count()
    }

    pub fn pt_count(&self) -> usize {
        self.pt.iter().filter(|&&b| b).count()
    }
}

pub fn expand_overlap(labels: &LabelMap) -> Result<ChannelMasks> {
    if labels.mode != LabelMode::Four {
        return Err(Error::Usage("expand_overlap needs a four-class label map".into()));
    }
    let ht = labels.classes.iter().map(|&c| matches!(c, Class::Ht | Class::Ov)).collect();
    let pt = labels.classes.iter().map(|&c| matches!(c, Class::Pt | Class::Ov)).collect();
    Ok(ChannelMasks { width: labels.width, height: labels.height, ht, pt })
}

/// Which pure class absorbs OV when collapsing to three classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverlapPolicy {
    ToHt,
    ToPt,
}

pub fn collapse_to_three(labels: &LabelMap, policy: OverlapPolicy) -> Result<LabelMap> {
    if labels.mode != LabelMode::Four {
        return Err(Error::Usage("collapse_to_three needs a four-class label map".into()));
    }
    let target = match policy {
        OverlapPolicy::ToHt => Class::Ht,
        OverlapPolicy::ToPt => Class::Pt,
    };
    let classes = labels.classes.iter().map(|&c| if c == Class::Ov { target } else { c }).collect();
    LabelMap::new(labels.width, labels.height, LabelMode::Three, classes)
}
