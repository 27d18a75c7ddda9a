//! Scribble and bounding-box annotations derived from dense masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{connected_components, Mask};
use crate::error::{Error, Result};

/// Support annotation style used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    Dense,
    Scribble,
    Bbox,
}

/// Upper bound on the share of the foreground a scribble may cover.
const MAX_SCRIBBLE_COVERAGE: f64 = 0.2;

/// Replaces a dense binary mask by a weaker annotation. `Dense` returns a copy.
pub fn weaken_annotation<R: Rng>(mask: &Mask, mode: Annotation, rng: &mut R) -> Result<Mask> {
    if mask.is_empty_mask() {
        return Err(Error::EmptyMask("cannot derive a weak annotation from an empty mask"));
    }
    Ok(match mode {
        Annotation::Dense => mask.clone(),
        Annotation::Scribble => scribble(mask, rng),
        Annotation::Bbox => bbox(mask, rng),
    })
}

/// Filled tight box around one uniformly chosen connected component.
fn bbox<R: Rng>(mask: &Mask, rng: &mut R) -> Mask {
    let comps = connected_components(mask);
    let comp = &comps[rng.random_range(0..comps.len())];
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &(y, x) in comp {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    Mask::from_fn(mask.height(), mask.width(), |y, x| u8::from((y0..=y1).contains(&y) && (x0..=x1).contains(&x)))
}

/// Random-walk stroke inside the largest component, dilated by one pixel and
/// clipped to the foreground.
fn scribble<R: Rng>(mask: &Mask, rng: &mut R) -> Mask {
    let (h, w) = mask.dims();
    let comps = connected_components(mask);
    let largest = comps.iter().max_by_key(|c| c.len()).expect("mask is nonempty");
    let mut inside = vec![false; h * w];
    for &(y, x) in largest {
        inside[y * w + x] = true;
    }
    let fg = mask.count_nonzero();
    let steps = ((0.05 * fg as f64).round() as usize).max(10);

    let mut path = vec![largest[rng.random_range(0..largest.len())]];
    let mut visited = vec![false; h * w];
    let (sy, sx) = path[0];
    visited[sy * w + sx] = true;
    let dirs: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let mut heading = rng.random_range(0..4);
    let mut cursor = 0;
    while path.len() < steps {
        let (y, x) = path[cursor];
        let mut fresh = Vec::with_capacity(4);
        for (d, &(dy, dx)) in dirs.iter().enumerate() {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if inside[j] && !visited[j] {
                fresh.push((d, ny as usize, nx as usize));
            }
        }
        if fresh.is_empty() {
            // dead end: resume from an earlier point of the stroke
            if cursor == 0 {
                break;
            }
            cursor -= 1;
            continue;
        }
        let pick = match fresh.iter().position(|&(d, _, _)| d == heading) {
            Some(i) if rng.random_bool(0.7) => i,
            _ => rng.random_range(0..fresh.len()),
        };
        let (d, ny, nx) = fresh[pick];
        heading = d;
        visited[ny * w + nx] = true;
        path.push((ny, nx));
        cursor = path.len() - 1;
    }

    let cap = ((MAX_SCRIBBLE_COVERAGE * fg as f64).floor() as usize).max(1);
    let mut out = Mask::zeros(h, w);
    let mut covered = 0;
    for &(y, x) in &path {
        let mut added = Vec::new();
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if mask.get(ny, nx) != 0 && out.get(ny, nx) == 0 && !added.contains(&(ny, nx)) {
                    added.push((ny, nx));
                }
            }
        }
        if covered + added.len() > cap {
            if covered == 0 {
                out.set(y, x, 1);
            }
            break;
        }
        covered += added.len();
        for (ny, nx) in added {
            out.set(ny, nx, 1);
        }
    }
    out
}
