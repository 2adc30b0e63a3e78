use std::io::{self, Write};

use super::{ShapeSample, VoxelGrid};

/// Wavefront OBJ export: one cube per occupied voxel, one group per part.
pub fn write_obj<W: Write>(sample: &ShapeSample, out: &mut W) -> io::Result<()> {
    writeln!(out, "# {} parts", sample.k())?;
    let mut next_vertex = 1usize;
    for (i, (grid, bbox)) in sample.parts.iter().zip(&sample.boxes).enumerate() {
        if !sample.mask.get(i) {
            continue;
        }
        writeln!(out, "g part_{i}")?;
        let r = grid.resolution();
        let lo = bbox.min_corner();
        let cell: [f64; 3] = std::array::from_fn(|a| bbox.extents[a] as f64 / r as f64);
        for (x, y, z) in occupied(grid) {
            let base = [lo[0] + x as f64 * cell[0], lo[1] + y as f64 * cell[1], lo[2] + z as f64 * cell[2]];
            for c in 0..8 {
                let v: [f64; 3] = std::array::from_fn(|a| base[a] + ((c >> a) & 1) as f64 * cell[a]);
                writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?;
            }
            // corner c has bit a set when offset along axis a
            const FACES: [[usize; 4]; 6] = [
                [0, 2, 3, 1],
                [4, 5, 7, 6],
                [0, 1, 5, 4],
                [2, 6, 7, 3],
                [0, 4, 6, 2],
                [1, 3, 7, 5],
            ];
            for f in FACES {
                writeln!(
                    out,
                    "f {} {} {} {}",
                    next_vertex + f[0],
                    next_vertex + f[1],
                    next_vertex + f[2],
                    next_vertex + f[3]
                )?;
            }
            next_vertex += 8;
        }
    }
    Ok(())
}

fn occupied(grid: &VoxelGrid) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let r = grid.resolution();
    (0..r).flat_map(move |z| {
        (0..r).flat_map(move |y| (0..r).filter(move |&x| grid.get(x, y, z) >= 0.5).map(move |x| (x, y, z)))
    })
}
