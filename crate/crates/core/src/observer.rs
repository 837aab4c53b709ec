//! Screen observation: frame capture, the three-frame cache, pixel diffing
//! and animation detection.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of frames kept by [`FrameCache`].
pub const CACHE_CAPACITY: usize = 3;
/// Default changed-fraction threshold above which a frame pair counts as motion.
pub const DEFAULT_ANIMATION_THRESHOLD: f64 = 0.005;

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("screen capture is not supported on this platform: {0}")]
    UnsupportedPlatform(String),
    #[error("region {region:?} exceeds the {width}x{height} screen")]
    RegionOutOfBounds { region: Rect, width: u32, height: u32 },
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("frame seq {new} does not follow cached seq {last}")]
    NonMonotonicSeq { last: u64, new: u64 },
    #[error("need {CACHE_CAPACITY} cached frames, have {0}")]
    Indeterminate(usize),
    #[error("capture backend failed: {0}")]
    Backend(String),
    #[error("png encoding failed: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x.checked_add(self.width).is_some_and(|r| r <= width)
            && self.y.checked_add(self.height).is_some_and(|b| b <= height)
    }
}

/// A located application window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub title: String,
}

impl WindowRect {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.width, self.height)
    }
}

/// Row-major RGBA pixel buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub captured_at_ms: u64,
    pub seq: u64,
}

impl Frame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize * 4, "pixel buffer size");
        Self {
            width,
            height,
            pixels,
            captured_at_ms: 0,
            seq: 0,
        }
    }

    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let pixels = rgba
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 4)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2], self.pixels[i + 3]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgba: [u8; 4]) {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        self.pixels[i..i + 4].copy_from_slice(&rgba);
    }

    /// Fills `rect` clipped to the frame.
    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, rgba: [u8; 4]) {
        let x0 = x.clamp(0, self.width as i64) as u32;
        let y0 = y.clamp(0, self.height as i64) as u32;
        let x1 = (x + w).clamp(0, self.width as i64) as u32;
        let y1 = (y + h).clamp(0, self.height as i64) as u32;
        for py in y0..y1 {
            for px in x0..x1 {
                self.set_pixel(px, py, rgba);
            }
        }
    }

    pub fn crop(&self, region: Rect) -> Result<Frame, ObserverError> {
        if !region.fits_within(self.width, self.height) {
            return Err(ObserverError::RegionOutOfBounds {
                region,
                width: self.width,
                height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(region.width as usize * region.height as usize * 4);
        for y in region.y..region.bottom() {
            let start = (y as usize * self.width as usize + region.x as usize) * 4;
            pixels.extend_from_slice(&self.pixels[start..start + region.width as usize * 4]);
        }
        Ok(Frame {
            width: region.width,
            height: region.height,
            pixels,
            captured_at_ms: self.captured_at_ms,
            seq: self.seq,
        })
    }

    pub fn inverted(&self) -> Frame {
        let mut out = self.clone();
        for px in out.pixels.chunks_exact_mut(4) {
            px[0] = 255 - px[0];
            px[1] = 255 - px[1];
            px[2] = 255 - px[2];
        }
        out
    }

    pub fn file_name(&self) -> String {
        frame_file_name(self.seq)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ObserverError> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgba8,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ObserverError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Frame, ObserverError> {
        let img = image::open(path)?.to_rgba8();
        let (width, height) = img.dimensions();
        Ok(Frame::new(width, height, img.into_raw()))
    }

    /// Nearest-neighbour downscale so that neither side exceeds `max_dim`.
    pub fn downscaled(&self, max_dim: u32) -> Frame {
        let longest = self.width.max(self.height);
        if max_dim == 0 || longest <= max_dim {
            return self.clone();
        }
        let w = (self.width as u64 * max_dim as u64 / longest as u64).max(1) as u32;
        let h = (self.height as u64 * max_dim as u64 / longest as u64).max(1) as u32;
        let mut out = Frame::filled(w, h, [0, 0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let sx = (x as u64 * self.width as u64 / w as u64) as u32;
                let sy = (y as u64 * self.height as u64 / h as u64) as u32;
                out.set_pixel(x, y, self.pixel(sx, sy));
            }
        }
        out.seq = self.seq;
        out.captured_at_ms = self.captured_at_ms;
        out
    }
}

pub fn frame_file_name(seq: u64) -> String {
    format!("frame_{seq:06}.png")
}

/// The most recent frames, oldest first.
#[derive(Debug, Clone, Default)]
pub struct FrameCache {
    frames: VecDeque<Arc<Frame>>,
}

impl FrameCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: Arc<Frame>) -> Result<(), ObserverError> {
        if let Some(last) = self.frames.back() {
            if frame.seq <= last.seq {
                return Err(ObserverError::NonMonotonicSeq {
                    last: last.seq,
                    new: frame.seq,
                });
            }
        }
        if self.frames.len() == CACHE_CAPACITY {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn latest(&self) -> Option<&Arc<Frame>> {
        self.frames.back()
    }

    pub fn previous(&self) -> Option<&Arc<Frame>> {
        self.frames.len().checked_sub(2).and_then(|i| self.frames.get(i))
    }

    pub fn frames(&self) -> impl Iterator<Item = &Arc<Frame>> {
        self.frames.iter()
    }

    pub fn seqs(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.seq).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub changed_fraction: f64,
    pub changed_bbox: Option<Rect>,
    pub pixel_count: u64,
}

impl DiffReport {
    pub fn unchanged(&self) -> bool {
        self.pixel_count == 0
    }
}

/// Counts pixels where any channel differs by more than `tolerance`.
pub fn diff(a: &Frame, b: &Frame, tolerance: u8) -> Result<DiffReport, ObserverError> {
    if a.width != b.width || a.height != b.height {
        return Err(ObserverError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    diff_region(a, b, Rect::new(0, 0, a.width, a.height), tolerance)
}

/// [`diff`] restricted to `region`; the fraction is relative to the region area.
pub fn diff_region(
    a: &Frame,
    b: &Frame,
    region: Rect,
    tolerance: u8,
) -> Result<DiffReport, ObserverError> {
    if a.width != b.width || a.height != b.height {
        return Err(ObserverError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    if !region.fits_within(a.width, a.height) {
        return Err(ObserverError::RegionOutOfBounds {
            region,
            width: a.width,
            height: a.height,
        });
    }
    let mut changed = 0u64;
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let stride = a.width as usize * 4;
    for y in region.y..region.bottom() {
        let row = y as usize * stride;
        for x in region.x..region.right() {
            let i = row + x as usize * 4;
            let differs = a.pixels[i..i + 4]
                .iter()
                .zip(&b.pixels[i..i + 4])
                .any(|(p, q)| p.abs_diff(*q) > tolerance);
            if differs {
                changed += 1;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    let total = region.width as u64 * region.height as u64;
    Ok(DiffReport {
        changed_fraction: changed as f64 / total as f64,
        changed_bbox: (changed > 0)
            .then(|| Rect::new(min_x, min_y, max_x - min_x + 1, max_y - min_y + 1)),
        pixel_count: changed,
    })
}

/// True when any consecutive cached pair changed by more than `threshold`.
pub fn is_animating(cache: &FrameCache, threshold: f64) -> Result<bool, ObserverError> {
    if cache.len() < CACHE_CAPACITY {
        return Err(ObserverError::Indeterminate(cache.len()));
    }
    let frames: Vec<_> = cache.frames().collect();
    for pair in frames.windows(2) {
        if diff(pair[0], pair[1], 0)?.changed_fraction > threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Change between the two most recent frames.
pub fn changed_since_previous(cache: &FrameCache, tolerance: u8) -> Option<DiffReport> {
    let (prev, last) = (cache.previous()?, cache.latest()?);
    diff(prev, last, tolerance).ok()
}

/// Change between the oldest and newest cached frames.
pub fn changed_across_cache(cache: &FrameCache, tolerance: u8) -> Option<DiffReport> {
    let first = cache.frames().next()?;
    let last = cache.latest()?;
    if cache.len() < 2 {
        return None;
    }
    diff(first, last, tolerance).ok()
}

/// A source of screen pixels.
pub trait ObserverBackend {
    fn screen_size(&self) -> (u32, u32);

    /// Full-screen pixels at this instant.
    fn grab(&mut self) -> Result<Frame, ObserverError>;

    fn now_ms(&self) -> u64;

    fn locate_window(&self, _title: &str) -> Option<WindowRect> {
        None
    }
}

/// Capture session: assigns sequence numbers and timestamps.
#[derive(Debug, Default)]
pub struct Observer {
    next_seq: u64,
}

impl Observer {
    pub fn new() -> Self {
        Self { next_seq: 1 }
    }

    pub fn capture(
        &mut self,
        backend: &mut dyn ObserverBackend,
        region: Option<Rect>,
    ) -> Result<Frame, ObserverError> {
        let (width, height) = backend.screen_size();
        if let Some(region) = region {
            if !region.fits_within(width, height) {
                return Err(ObserverError::RegionOutOfBounds { region, width, height });
            }
        }
        let full = backend.grab()?;
        let mut frame = match region {
            Some(region) => full.crop(region)?,
            None => full,
        };
        frame.seq = self.next_seq.max(1);
        frame.captured_at_ms = backend.now_ms();
        self.next_seq = frame.seq + 1;
        Ok(frame)
    }
}

/// Which display server the process would capture from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DisplayServer {
    Wayland,
    X11,
    MacOs,
    Windows,
    Headless,
}

pub fn detect_display_server(env: &dyn Fn(&str) -> Option<String>) -> DisplayServer {
    if cfg!(target_os = "macos") {
        return DisplayServer::MacOs;
    }
    if cfg!(windows) {
        return DisplayServer::Windows;
    }
    let session = env("XDG_SESSION_TYPE").unwrap_or_default();
    if session.eq_ignore_ascii_case("wayland") || env("WAYLAND_DISPLAY").is_some() {
        DisplayServer::Wayland
    } else if env("DISPLAY").is_some() {
        DisplayServer::X11
    } else {
        DisplayServer::Headless
    }
}

/// Native desktop capture. Wayland is rejected outright because it blocks
/// cross-window capture and input injection; other servers need a platform
/// driver, which this build does not ship.
#[derive(Debug)]
pub struct NativeBackend {
    _private: (),
}

impl NativeBackend {
    pub fn connect() -> Result<Self, ObserverError> {
        Self::connect_with(&|k| std::env::var(k).ok())
    }

    pub fn connect_with(env: &dyn Fn(&str) -> Option<String>) -> Result<Self, ObserverError> {
        match detect_display_server(env) {
            DisplayServer::Wayland => Err(ObserverError::UnsupportedPlatform(
                "Wayland does not allow cross-window capture or input injection".into(),
            )),
            DisplayServer::Headless => Err(ObserverError::UnsupportedPlatform(
                "no display server found".into(),
            )),
            other => Err(ObserverError::UnsupportedPlatform(format!(
                "no native capture driver for {other:?} in this build; use a virtual or process target"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seq: u64) -> Arc<Frame> {
        let mut f = Frame::filled(4, 4, [0, 0, 0, 255]);
        f.seq = seq;
        Arc::new(f)
    }

    #[test]
    fn cache_keeps_last_three() {
        let mut cache = FrameCache::new();
        cache.push(frame(1)).unwrap();
        assert_eq!(cache.len(), 1);
        for s in 2..=4 {
            cache.push(frame(s)).unwrap();
        }
        assert_eq!(cache.seqs(), vec![2, 3, 4]);
    }

    #[test]
    fn cache_rejects_repeated_seq() {
        let mut cache = FrameCache::new();
        cache.push(frame(2)).unwrap();
        assert!(matches!(
            cache.push(frame(2)),
            Err(ObserverError::NonMonotonicSeq { last: 2, new: 2 })
        ));
    }

    #[test]
    fn diff_examples() {
        let a = Frame::filled(10, 10, [10, 20, 30, 255]);
        let same = diff(&a, &a, 0).unwrap();
        assert_eq!(same.changed_fraction, 0.0);
        assert_eq!(same.changed_bbox, None);

        assert_eq!(diff(&a, &a.inverted(), 0).unwrap().changed_fraction, 1.0);

        let mut b = a.clone();
        b.set_pixel(3, 7, [11, 20, 30, 255]);
        let d = diff(&a, &b, 0).unwrap();
        assert_eq!(d.changed_fraction, 0.01);
        assert_eq!(d.pixel_count, 1);
        assert_eq!(d.changed_bbox, Some(Rect::new(3, 7, 1, 1)));
        // The single pixel differs by 1, which a tolerance of 1 absorbs.
        assert_eq!(diff(&a, &b, 1).unwrap().pixel_count, 0);

        let small = Frame::filled(5, 5, [0, 0, 0, 0]);
        assert!(matches!(diff(&a, &small, 0), Err(ObserverError::DimensionMismatch(..))));
    }

    #[test]
    fn animation_examples() {
        let mut cache = FrameCache::new();
        for s in 1..=3 {
            cache.push(frame(s)).unwrap();
        }
        assert!(!is_animating(&cache, DEFAULT_ANIMATION_THRESHOLD).unwrap());

        // 10x10 frames, pair (2,3) differs in 2 pixels = 2%.
        let mut cache = FrameCache::new();
        let base = Frame::filled(10, 10, [0, 0, 0, 255]);
        for s in 1..=3u64 {
            let mut f = base.clone();
            f.seq = s;
            if s == 3 {
                f.set_pixel(0, 0, [255, 0, 0, 255]);
                f.set_pixel(1, 0, [255, 0, 0, 255]);
            }
            cache.push(Arc::new(f)).unwrap();
        }
        assert!(is_animating(&cache, DEFAULT_ANIMATION_THRESHOLD).unwrap());

        let mut short = FrameCache::new();
        short.push(frame(1)).unwrap();
        short.push(frame(2)).unwrap();
        assert!(matches!(
            is_animating(&short, DEFAULT_ANIMATION_THRESHOLD),
            Err(ObserverError::Indeterminate(2))
        ));
    }

    #[test]
    fn wayland_is_unsupported() {
        let env = |k: &str| (k == "WAYLAND_DISPLAY").then(|| "wayland-0".to_string());
        if cfg!(target_os = "linux") {
            assert!(matches!(
                NativeBackend::connect_with(&env),
                Err(ObserverError::UnsupportedPlatform(msg)) if msg.contains("Wayland")
            ));
        }
    }

    #[test]
    fn png_round_trip() {
        let mut f = Frame::filled(3, 2, [1, 2, 3, 255]);
        f.set_pixel(2, 1, [200, 100, 50, 255]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(frame_file_name(1));
        f.save_png(&path).unwrap();
        let back = Frame::load_png(&path).unwrap();
        assert_eq!(back.pixels, f.pixels);
    }

    #[test]
    fn downscale_respects_max_dimension() {
        let f = Frame::filled(400, 200, [9, 9, 9, 255]);
        let d = f.downscaled(100);
        assert_eq!((d.width, d.height), (100, 50));
        assert_eq!(f.downscaled(0).width, 400);
    }
}
