//! Composite image: one row per class, one column per image source.

use std::path::Path;

use busaug_core::data::{ClassLabel, Image, Manifest, Sample};

/// One column of the grid: the real images or one generation variant.
pub struct GridColumn<'a> {
    pub title: String,
    pub manifest: &'a Manifest,
    /// Take synthetic samples (true) or real ones (false).
    pub synthetic: bool,
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const PAD: usize = 2;

fn glyph(c: char) -> [&'static str; GLYPH_H] {
    match c {
        'A' => [" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
        'B' => ["#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "],
        'D' => ["#### ", "#   #", "#   #", "#   #", "#   #", "#   #", "#### "],
        'E' => ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"],
        'G' => [" ####", "#    ", "#    ", "#  ##", "#   #", "#   #", " ### "],
        'I' => [" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
        'L' => ["#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"],
        'M' => ["#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"],
        'N' => ["#   #", "##  #", "# # #", "#  ##", "#   #", "#   #", "#   #"],
        'O' => [" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
        'R' => ["#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"],
        'S' => [" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "],
        'T' => ["#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "],
        '2' => [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
        '+' => ["     ", "  #  ", "  #  ", "#####", "  #  ", "  #  ", "     "],
        _ => ["     "; GLYPH_H],
    }
}

fn text_width(s: &str) -> usize {
    s.chars().count() * (GLYPH_W + 1)
}

fn draw_text(canvas: &mut [f64], stride: usize, x0: usize, y0: usize, text: &str) {
    for (i, c) in text.to_ascii_uppercase().chars().enumerate() {
        for (dy, row) in glyph(c).iter().enumerate() {
            for (dx, b) in row.bytes().enumerate() {
                if b == b'#' {
                    canvas[(y0 + dy) * stride + x0 + i * (GLYPH_W + 1) + dx] = 1.0;
                }
            }
        }
    }
}

/// Short column titles that fit a 64-pixel cell.
pub fn method_title(arm: &str) -> String {
    match arm {
        "sd" => "SD".into(),
        "sd_img2img" => "SD+I2I".into(),
        "sd_ti" => "SD+TI".into(),
        "sd_ti_img2img" => "SD+TI+I2I".into(),
        other => other.to_ascii_uppercase(),
    }
}

/// First matching sample of `label`, in seed order (then path order).
fn pick<'a>(col: &GridColumn<'a>, label: ClassLabel) -> Option<&'a Sample> {
    col.manifest
        .samples
        .iter()
        .filter(|s| s.label == label && s.synthetic == col.synthetic)
        .min_by(|a, b| (a.seed, &a.path).cmp(&(b.seed, &b.path)))
}

/// Builds the composite, with class names in the left margin and column titles on top.
pub fn compose_grid(columns: &[GridColumn], rows: &[ClassLabel]) -> Result<Image, String> {
    if columns.is_empty() || rows.is_empty() {
        return Err("grid needs at least one row and one column".into());
    }
    let mut cells = Vec::with_capacity(rows.len());
    let mut size = 0;
    for &label in rows {
        let mut row = Vec::with_capacity(columns.len());
        for col in columns {
            let s = pick(col, label).ok_or_else(|| format!("no image for ({label}, {})", col.title))?;
            let img = col.manifest.image(s).map_err(|e| e.to_string())?;
            size = size.max(img.size());
            row.push(img);
        }
        cells.push(row);
    }
    let cell = size.max(columns.iter().map(|c| text_width(&c.title)).max().unwrap_or(0));
    let left = rows.iter().map(|l| text_width(l.as_str())).max().unwrap_or(0) + 2 * PAD;
    let top = GLYPH_H + 2 * PAD;
    let width = left + columns.len() * (cell + PAD);
    let height = top + rows.len() * (cell + PAD);
    let mut canvas = vec![-1.0; width * height];
    for (j, col) in columns.iter().enumerate() {
        draw_text(&mut canvas, width, left + j * (cell + PAD), PAD, &col.title);
    }
    for (i, (&label, row)) in rows.iter().zip(&cells).enumerate() {
        let y0 = top + i * (cell + PAD);
        draw_text(&mut canvas, width, PAD, y0 + (cell.saturating_sub(GLYPH_H)) / 2, label.as_str());
        for (j, img) in row.iter().enumerate() {
            let img = if img.size() == size { (**img).clone() } else { img.resized(size) };
            let x0 = left + j * (cell + PAD);
            for y in 0..size {
                for x in 0..size {
                    canvas[(y0 + y) * width + x0 + x] = img.get(x, y);
                }
            }
        }
    }
    rect_image(width, height, canvas)
}

fn rect_image(width: usize, height: usize, pixels: Vec<f64>) -> Result<Image, String> {
    // Images are square; pad the shorter side.
    let side = width.max(height);
    let mut square = vec![-1.0; side * side];
    for y in 0..height {
        square[y * side..y * side + width].copy_from_slice(&pixels[y * width..(y + 1) * width]);
    }
    Image::new(side, square).map_err(|e| e.to_string())
}

pub fn export_grid(columns: &[GridColumn], rows: &[ClassLabel], out: &Path) -> Result<(), String> {
    compose_grid(columns, rows)?.save_png(out).map_err(|e| e.to_string())
}
