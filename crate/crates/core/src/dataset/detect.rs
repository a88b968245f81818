use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Axis-aligned face box in pixel coordinates, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub frame_index: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub confidence: f64,
}

impl FaceBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// Pluggable face detector.
pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(
        &self,
        frame: ArrayView3<'_, f32>,
        frame_index: usize,
    ) -> Result<Vec<FaceBox>, DatasetError>;
}

/// Finds the bright disks planted by the synthetic corpus generator: pixels
/// whose brightest channel reaches `threshold`, grouped into 4-connected
/// components of at least `min_area` pixels. Confidence is the component's
/// fill ratio of its bounding box (a disk fills about π/4 of it).
#[derive(Debug, Clone, PartialEq)]
pub struct DiskDetector {
    pub threshold: f32,
    pub min_area: usize,
}

impl Default for DiskDetector {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            min_area: 12,
        }
    }
}

impl FaceDetector for DiskDetector {
    fn name(&self) -> &str {
        "disk"
    }

    fn detect(
        &self,
        frame: ArrayView3<'_, f32>,
        frame_index: usize,
    ) -> Result<Vec<FaceBox>, DatasetError> {
        let (h, w, _) = frame.dim();
        let lit = |y: usize, x: usize| {
            frame[[y, x, 0]].max(frame[[y, x, 1]]).max(frame[[y, x, 2]]) >= self.threshold
        };
        let mut seen = vec![false; h * w];
        let mut boxes = Vec::new();
        let mut stack = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if seen[y * w + x] || !lit(y, x) {
                    continue;
                }
                seen[y * w + x] = true;
                stack.push((y, x));
                let (mut x0, mut y0, mut x1, mut y1, mut area) = (x, y, x, y, 0usize);
                while let Some((cy, cx)) = stack.pop() {
                    area += 1;
                    x0 = x0.min(cx);
                    x1 = x1.max(cx);
                    y0 = y0.min(cy);
                    y1 = y1.max(cy);
                    let mut visit = |ny: usize, nx: usize| {
                        if !seen[ny * w + nx] && lit(ny, nx) {
                            seen[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    };
                    if cy > 0 {
                        visit(cy - 1, cx);
                    }
                    if cy + 1 < h {
                        visit(cy + 1, cx);
                    }
                    if cx > 0 {
                        visit(cy, cx - 1);
                    }
                    if cx + 1 < w {
                        visit(cy, cx + 1);
                    }
                }
                if area >= self.min_area {
                    let bbox = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
                    boxes.push(FaceBox {
                        frame_index,
                        x0,
                        y0,
                        x1: x1 + 1,
                        y1: y1 + 1,
                        confidence: (area as f64 / bbox).min(1.0),
                    });
                }
            }
        }
        Ok(boxes)
    }
}

/// Run `detector` on one frame; boxes come back sorted by confidence,
/// highest first (ties by position).
pub fn detect_faces(
    frame: ArrayView3<'_, f32>,
    frame_index: usize,
    detector: &dyn FaceDetector,
) -> Result<Vec<FaceBox>, DatasetError> {
    let (h, w, c) = frame.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(DatasetError::InvalidFrame(format!(
            "frame {frame_index}: shape {:?}",
            frame.dim()
        )));
    }
    if let Some(v) = frame.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DatasetError::InvalidFrame(format!(
            "frame {frame_index}: pixel value {v} outside [0, 1]"
        )));
    }
    let mut boxes = detector.detect(frame, frame_index)?;
    for b in &boxes {
        if !(b.x0 < b.x1
            && b.x1 <= w
            && b.y0 < b.y1
            && b.y1 <= h
            && (0.0..=1.0).contains(&b.confidence))
        {
            return Err(DatasetError::Detector {
                detector: detector.name().into(),
                frame_index,
                message: format!("box out of bounds: {b:?}"),
            });
        }
    }
    boxes.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then((a.y0, a.x0).cmp(&(b.y0, b.x0)))
    });
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn disk(frame: &mut Array3<f32>, cx: f64, cy: f64, r: f64) {
        let (h, w, _) = frame.dim();
        for y in 0..h {
            for x in 0..w {
                if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r {
                    frame[[y, x, 0]] = 0.9;
                    frame[[y, x, 1]] = 0.8;
                }
            }
        }
    }

    #[test]
    fn one_disk_one_box_around_center() {
        let mut f = Array3::from_elem((40, 50, 3), 0.1f32);
        disk(&mut f, 20.0, 15.0, 6.0);
        let boxes = detect_faces(f.view(), 3, &DiskDetector::default()).unwrap();
        assert_eq!(boxes.len(), 1);
        assert!(boxes[0].contains(20.0, 15.0));
        assert_eq!(boxes[0].frame_index, 3);
        assert!(boxes[0].confidence > 0.6 && boxes[0].confidence <= 1.0);
    }

    #[test]
    fn blank_frame_has_no_boxes() {
        let f = Array3::from_elem((16, 16, 3), 0.2f32);
        assert!(detect_faces(f.view(), 0, &DiskDetector::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn two_disks_two_boxes_sorted() {
        let mut f = Array3::from_elem((40, 60, 3), 0.0f32);
        disk(&mut f, 12.0, 12.0, 6.0);
        disk(&mut f, 45.0, 25.0, 8.0);
        let boxes = detect_faces(f.view(), 0, &DiskDetector::default()).unwrap();
        assert_eq!(boxes.len(), 2);
        assert!(boxes[0].confidence >= boxes[1].confidence);
        assert!(boxes.iter().any(|b| b.contains(12.0, 12.0)));
        assert!(boxes.iter().any(|b| b.contains(45.0, 25.0)));
    }

    #[test]
    fn out_of_range_frame_is_rejected() {
        let f = Array3::from_elem((4, 4, 3), 1.5f32);
        assert!(detect_faces(f.view(), 0, &DiskDetector::default()).is_err());
    }
}
