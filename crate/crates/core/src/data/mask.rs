use std::collections::VecDeque;

use super::ClassId;

/// Dense `H × W` grid of 8-bit labels. Used both for multi-class label maps and
/// for binary masks (values 0/1).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask data/shape mismatch");
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Number of nonzero cells.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Applies a 256-entry relabeling table.
    pub fn remap(&self, lut: &[u8; 256]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| lut[v as usize]).collect(),
        }
    }

    /// True when every nonzero cell of `self` is nonzero in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b != 0)
    }
}

pub fn binarize_mask(label_map: &Mask, class_id: ClassId) -> Mask {
    Mask {
        height: label_map.height,
        width: label_map.width,
        data: label_map.data.iter().map(|&v| u8::from(v == class_id)).collect(),
    }
}

/// 4-connected components of the nonzero cells, each as a list of `(y, x)`,
/// ordered by their first cell in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.data[start] == 0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            let mut visit = |j: usize| {
                if !seen[j] && mask.data[j] != 0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        comps.push(comp);
    }
    comps
}
