use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{self, CELL_HEIGHT, CELL_WIDTH, GLYPH_HEIGHT, GLYPH_WIDTH, GLYPH_X_OFFSET};
use super::PixelGrid;
use crate::error::{Error, Result};

const INK_MIN: u8 = 192;

/// Walks the fixed character-cell layout, calling `place(row, col, ch)` for
/// each visible character. Returns how many chars of `text` fit.
///
/// Layout is left-to-right, top-to-bottom, one char per cell; lines wrap
/// at the right edge and at `'\n'`; everything past the last row is dropped.
fn layout(
    text: &str,
    rows: usize,
    cols: usize,
    mut place: impl FnMut(usize, usize, char),
) -> usize {
    let (mut row, mut col) = (0usize, 0usize);
    for (i, c) in text.chars().enumerate() {
        if c == '\n' {
            row += 1;
            col = 0;
            continue;
        }
        if col == cols {
            row += 1;
            col = 0;
        }
        if row >= rows {
            return i;
        }
        place(row, col, c);
        col += 1;
    }
    text.chars().count()
}

fn grid_cells(height: usize, width: usize) -> Result<(usize, usize)> {
    if height < CELL_HEIGHT || width < CELL_WIDTH {
        return Err(Error::Config(format!(
            "canvas {height}x{width} is smaller than one {CELL_HEIGHT}x{CELL_WIDTH} glyph cell"
        )));
    }
    Ok((height / CELL_HEIGHT, width / CELL_WIDTH))
}

/// Number of leading chars of `text` that land on a `height`x`width` canvas.
pub fn visible_char_count(text: &str, height: usize, width: usize) -> Result<usize> {
    let (rows, cols) = grid_cells(height, width)?;
    Ok(layout(text, rows, cols, |_, _, _| {}))
}

/// Renders `text` as light ink on a black grayscale canvas.
///
/// Every glyph gets an ink level drawn from a ChaCha stream seeded with
/// `seed`, so the output is a pure function of the three arguments.
pub fn render_text_screenshot(
    text: &str,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<PixelGrid> {
    let (rows, cols) = grid_cells(height, width)?;
    let mut grid = PixelGrid::filled(height, width, 1, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout(text, rows, cols, |row, col, c| {
        let Some(bits) = font::glyph(c) else { return };
        let ink: u8 = rng.gen_range(INK_MIN..=255);
        let top = row * CELL_HEIGHT;
        let left = col * CELL_WIDTH + GLYPH_X_OFFSET;
        for (dy, line) in bits.iter().enumerate().take(GLYPH_HEIGHT) {
            for dx in 0..GLYPH_WIDTH {
                if line & (1 << (GLYPH_WIDTH - 1 - dx)) != 0 {
                    grid.set(top + dy, left + dx, 0, ink);
                }
            }
        }
    });
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_background() {
        let g = render_text_screenshot("", 64, 64, 0).unwrap();
        assert_eq!(g.height(), 64);
        assert!(g.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn canvas_smaller_than_cell_is_rejected() {
        assert!(render_text_screenshot("a", 7, 64, 0).is_err());
        assert!(render_text_screenshot("a", 64, 7, 0).is_err());
        assert!(render_text_screenshot("a", 8, 8, 0).is_ok());
    }

    #[test]
    fn deterministic() {
        let a = render_text_screenshot("hello world", 32, 64, 9).unwrap();
        let b = render_text_screenshot("hello world", 32, 64, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glyph_lands_in_its_cell() {
        let g = render_text_screenshot(" i", 8, 16, 3).unwrap();
        // 'I' top row is 01110: columns 1..=3 of the glyph, shifted by the cell offset.
        let lit: Vec<usize> = (0..16).filter(|&c| g.get(0, c, 0) > 0).collect();
        assert_eq!(lit, vec![8 + 2, 8 + 3, 8 + 4]);
        assert!((0..8).all(|r| (0..8).all(|c| g.get(r, c, 0) == 0)));
        assert!(g.get(0, 10, 0) >= INK_MIN);
    }

    #[test]
    fn overflow_renders_visible_prefix() {
        let long: String = (0..10_000)
            .map(|i| char::from(b'a' + (i * 7 % 26) as u8))
            .collect();
        // 64x64 holds 8 rows of 8 cells.
        let fits = 8 * 8;
        assert_eq!(visible_char_count(&long, 64, 64).unwrap(), fits);
        let prefix: String = long.chars().take(fits).collect();
        assert_eq!(
            render_text_screenshot(&long, 64, 64, 5).unwrap(),
            render_text_screenshot(&prefix, 64, 64, 5).unwrap()
        );
    }

    #[test]
    fn newline_starts_next_row() {
        // 4 cells per row: padding to the edge and an explicit newline agree.
        let a = render_text_screenshot("ab\ncd", 16, 32, 1).unwrap();
        let b = render_text_screenshot("ab  cd", 16, 32, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(visible_char_count("ab\ncd\nef", 16, 32).unwrap(), 6);
    }

    proptest! {
        #[test]
        fn distinct_visible_words_render_differently(
            a in "[a-z0-9]{1,8}( [a-z0-9]{1,8}){0,3}",
            b in "[a-z0-9]{1,8}( [a-z0-9]{1,8}){0,3}",
        ) {
            // The canvas holds 5x8 cells; both strings fit entirely.
            prop_assume!(a != b);
            let ga = render_text_screenshot(&a, 40, 64, 0).unwrap();
            let gb = render_text_screenshot(&b, 40, 64, 0).unwrap();
            prop_assert_ne!(ga, gb);
        }
    }
}
